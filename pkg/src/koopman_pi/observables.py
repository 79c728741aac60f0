"""Polynomial observables over the extended state ``(x, u)``.

Every monomial is ``prod_j x_j**p_j * prod_l u_l**q_l`` with ``sum(q) <= 1``
so that the control enters each observable at most linearly, and the
constant monomial is excluded so that the recovered drift vanishes at the
origin.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import comb
from typing import Sequence, Union

import numpy as np


@dataclass(frozen=True, order=True)
class MultiIndex:
    """Exponents ``p`` (state) and ``q`` (control) of one monomial."""

    p: tuple[int, ...]
    q: tuple[int, ...]

    def __post_init__(self):
        if any(e < 0 for e in self.p + self.q):
            raise ValueError(f"negative exponent in {self}")
        if sum(self.q) > 1:
            raise ValueError(f"control degree exceeds 1 in {self}")
        if sum(self.p) + sum(self.q) == 0:
            raise ValueError("constant monomial is not allowed")

    @property
    def degree(self) -> int:
        return sum(self.p) + sum(self.q)

    @property
    def control_channel(self) -> int | None:
        """Index ``l`` with ``q = e_l``, or ``None`` for a drift monomial."""
        for l, e in enumerate(self.q):
            if e:
                return l
        return None

    def label(self, state_names=None, input_names=None) -> str:
        xs = state_names or [f"x{j + 1}" for j in range(len(self.p))]
        us = input_names or [f"u{l + 1}" for l in range(len(self.q))]
        parts = []
        for name, e in zip(list(xs) + list(us), self.p + self.q):
            if e == 1:
                parts.append(name)
            elif e > 1:
                parts.append(f"{name}^{e}")
        return "*".join(parts)


@dataclass(frozen=True)
class MaxPerVariable:
    """Every state exponent bounded by ``p_max``."""

    p_max: int

    def admits(self, p: Sequence[int]) -> bool:
        return max(p, default=0) <= self.p_max

    def count(self, n: int, m: int) -> int:
        return (self.p_max + 1) ** n * (m + 1) - 1

    def to_dict(self) -> dict:
        return {"kind": "max_per_variable", "p_max": self.p_max}


@dataclass(frozen=True)
class TotalDegree:
    """Sum of state exponents bounded by ``p_sum``; control bounded separately."""

    p_sum: int

    def admits(self, p: Sequence[int]) -> bool:
        return sum(p) <= self.p_sum

    def count(self, n: int, m: int) -> int:
        return comb(n + self.p_sum, self.p_sum) * (m + 1) - 1

    def to_dict(self) -> dict:
        return {"kind": "total_degree", "p_sum": self.p_sum}


DegreeRule = Union[MaxPerVariable, TotalDegree]


def rule_from_dict(d: dict) -> DegreeRule:
    kind = d.get("kind")
    if kind == "max_per_variable":
        return MaxPerVariable(int(d["p_max"]))
    if kind == "total_degree":
        return TotalDegree(int(d["p_sum"]))
    raise ValueError(f"unknown degree rule {kind!r}")


def _order_key(idx: MultiIndex):
    # graded; drift before input; x1 before x2, u1 before u2
    return (idx.degree, sum(idx.q), tuple(-e for e in idx.q), tuple(-e for e in idx.p))


@dataclass(frozen=True)
class Dictionary:
    """Ordered, immutable set of polynomial observables.

    Attributes
    ----------
    indices : tuple of MultiIndex
        Monomials in canonical graded order.
    n, m : int
        State and input dimensions.
    rule : MaxPerVariable or TotalDegree
        Degree rule used to build the set (``None`` for hand-built sets).
    coordinate_slots : tuple of int
        ``coordinate_slots[j]`` is the position of the monomial ``x_j``.
    """

    indices: tuple[MultiIndex, ...]
    n: int
    m: int
    rule: DegreeRule | None = None
    coordinate_slots: tuple[int, ...] = field(init=False)
    _parent: np.ndarray = field(init=False, repr=False, compare=False)
    _factor: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("duplicate monomials in dictionary")
        for idx in self.indices:
            if len(idx.p) != self.n or len(idx.q) != self.m:
                raise ValueError(f"{idx} does not match dimensions n={self.n}, m={self.m}")
        pos = {idx: i for i, idx in enumerate(self.indices)}
        slots = []
        for j in range(self.n):
            e = MultiIndex(tuple(int(k == j) for k in range(self.n)), (0,) * self.m)
            if e not in pos:
                raise ValueError(f"coordinate monomial x{j + 1} missing from dictionary")
            slots.append(pos[e])
        object.__setattr__(self, "coordinate_slots", tuple(slots))
        self._build_recurrence(pos)

    def _build_recurrence(self, pos):
        # each monomial = (earlier monomial or 1) * one variable
        parent = np.full(len(self.indices), -1, dtype=np.int64)
        factor = np.zeros(len(self.indices), dtype=np.int64)
        for i, idx in enumerate(self.indices):
            exps = list(idx.p + idx.q)
            v = max(k for k, e in enumerate(exps) if e > 0)
            exps[v] -= 1
            factor[i] = v
            if sum(exps) > 0:
                red = MultiIndex(tuple(exps[: self.n]), tuple(exps[self.n:]))
                parent[i] = pos.get(red, -2)
        object.__setattr__(self, "_parent", parent)
        object.__setattr__(self, "_factor", factor)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def N(self) -> int:
        return len(self.indices)

    def __call__(self, x, u=None) -> np.ndarray:
        return eval_dictionary(self, x, u)

    def to_json(self) -> str:
        return json.dumps(self.to_records())

    def to_records(self) -> list[dict]:
        return [{"p": list(idx.p), "q": list(idx.q)} for idx in self.indices]

    @classmethod
    def from_records(cls, records, n=None, m=None, rule=None) -> "Dictionary":
        indices = tuple(MultiIndex(tuple(r["p"]), tuple(r["q"])) for r in records)
        if n is None:
            n = len(indices[0].p)
        if m is None:
            m = len(indices[0].q)
        return cls(indices, n, m, rule)

    @classmethod
    def from_json(cls, text: str) -> "Dictionary":
        return cls.from_records(json.loads(text))

    def labels(self) -> list[str]:
        return [idx.label() for idx in self.indices]


def enumerate_dictionary(n: int, m: int, rule: DegreeRule) -> Dictionary:
    """All admissible monomials for ``rule`` in canonical graded order."""
    if n < 1 or m < 0:
        raise ValueError(f"need n >= 1 and m >= 0, got n={n}, m={m}")
    bound = rule.p_max if isinstance(rule, MaxPerVariable) else rule.p_sum
    if bound < 1:
        raise ValueError("degree bound must be >= 1 so coordinates are included")
    controls = [(0,) * m] + [tuple(int(k == l) for k in range(m)) for l in range(m)]
    indices = []
    for p in itertools.product(range(bound + 1), repeat=n):
        if not rule.admits(p):
            continue
        for q in controls:
            if sum(p) + sum(q) > 0:
                indices.append(MultiIndex(tuple(p), q))
    indices.sort(key=_order_key)
    return Dictionary(tuple(indices), n, m, rule)


def dictionary_from_indices(indices: Sequence[MultiIndex], n: int, m: int) -> Dictionary:
    return Dictionary(tuple(sorted(indices, key=_order_key)), n, m, None)


def eval_dictionary(d: Dictionary, x, u=None) -> np.ndarray:
    """Evaluate all observables.

    ``x`` has shape ``(..., n)`` and ``u`` shape ``(..., m)``; the result has
    shape ``(..., N)``. Batched inputs are evaluated in one pass by building
    each monomial from a lower-degree one.
    """
    x = np.asarray(x, dtype=float)
    if u is None:
        if d.m:
            raise ValueError("input vector required for a dictionary with m > 0")
        u = np.zeros(x.shape[:-1] + (0,))
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != d.n or u.shape[-1] != d.m:
        raise ValueError(
            f"dimension mismatch: x has {x.shape[-1]} (want {d.n}), u has {u.shape[-1]} (want {d.m})"
        )
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    z = np.concatenate(
        [np.broadcast_to(x, batch + (d.n,)), np.broadcast_to(u, batch + (d.m,))], axis=-1
    )
    out = np.empty(z.shape[:-1] + (d.N,))
    if np.any(d._parent == -2):
        # hand-built set that is not downward closed
        for i, idx in enumerate(d.indices):
            e = np.asarray(idx.p + idx.q)
            out[..., i] = np.prod(z ** e, axis=-1)
        return out
    for deg in range(1, max(idx.degree for idx in d.indices) + 1):
        sel = np.array([i for i, idx in enumerate(d.indices) if idx.degree == deg])
        if sel.size == 0:
            continue
        par = d._parent[sel]
        fac = z[..., d._factor[sel]]
        if deg == 1:
            out[..., sel] = fac
        else:
            out[..., sel] = out[..., par] * fac
    return out


def eval_monomial_split(d: Dictionary) -> tuple[np.ndarray, list[np.ndarray]]:
    """Positions of drift monomials (``q = 0``) and, per channel, ``q = e_l``."""
    drift = [i for i, idx in enumerate(d.indices) if idx.control_channel is None]
    inputs = [[i for i, idx in enumerate(d.indices) if idx.control_channel == l] for l in range(d.m)]
    return np.array(drift, dtype=np.int64), [np.array(b, dtype=np.int64) for b in inputs]


def state_exponents(d: Dictionary, positions) -> np.ndarray:
    """State exponent matrix ``(len(positions), n)`` for the given slots."""
    return np.array([d.indices[i].p for i in positions], dtype=np.int64).reshape(-1, d.n)


def eval_state_monomials(exponents: np.ndarray, x) -> np.ndarray:
    """Evaluate ``prod_j x_j**e_j`` for each row of ``exponents`` at ``x (..., n)``."""
    x = np.asarray(x, dtype=float)
    exponents = np.asarray(exponents, dtype=np.int64)
    out = np.ones(x.shape[:-1] + (exponents.shape[0],))
    if exponents.size == 0:
        return out
    top = int(exponents.max())
    powers = [np.ones_like(x)]
    for _ in range(top):
        powers.append(powers[-1] * x)
    powers = np.stack(powers, axis=-1)  # (..., n, top+1)
    for j in range(exponents.shape[1]):
        col = exponents[:, j]
        if np.any(col):
            out = out * powers[..., j, :][..., col]
    return out
