"""Generator identification of control-affine systems from trajectory data.

The input is treated as an extra state with ``udot = 0``. For every sampled
extended initial state the truncated Yosida transform

    lam**2 * int_0^T_max exp(-lam t) phi(z(t)) dt - lam * phi(z(0))

of each observable is evaluated by quadrature along the trajectory, giving
one row of ``Y``; the observables at the initial state give the matching row
of ``X``. The generator matrix is the least-squares solution of
``X L = Y`` and the columns belonging to the coordinate monomials ``x_j``
are read off as drift and input-gain polynomials.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, special

from . import numerics
from .dynamics import ControlAffineSystem, rollout, step_count
from .observables import (
    Dictionary,
    enumerate_dictionary,
    eval_dictionary,
    eval_monomial_split,
    eval_state_monomials,
    rule_from_dict,
    state_exponents,
)

log = logging.getLogger(__name__)


class IdentificationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not lo:
            raise ValueError("box bounds must be non-empty and of equal length")
        if any(not (a < b) for a, b in zip(lo, hi)):
            raise ValueError(f"ill-formed box {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, half_width: float, dim: int) -> "Box":
        return cls((-half_width,) * dim, (half_width,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(np.array(self.lo), np.array(self.hi), size=(count, self.dim))

    def head(self, k: int) -> "Box":
        return Box(self.lo[:k], self.hi[:k])


@dataclass(frozen=True)
class SamplePlan:
    domain: Box
    M: int
    T: float = 1.0
    rate: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("sample plan needs M >= 1 trajectories")
        if self.rate <= 0 or self.T <= 0:
            raise ValueError("rate and horizon must be positive")
        steps = self.T * self.rate
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError(f"rate * T = {steps} is not an integer number of steps")

    @property
    def dt(self) -> float:
        return 1.0 / self.rate

    @property
    def steps(self) -> int:
        return int(round(self.T * self.rate))


@dataclass(frozen=True)
class YosidaConfig:
    """Parameters of the truncated Yosida transform.

    ``quadrature`` selects how ``int exp(-lam t) phi(t) dt`` is computed from
    samples: ``"cubic"`` and ``"linear"`` integrate the exponential weight
    exactly against a piecewise cubic / linear interpolant of the samples,
    ``"trapezoid"`` is the plain composite rule on the product (biased by
    ``O((lam dt)**2)``, kept for comparison). ``invert`` maps the fitted
    matrix through ``L = lam L_lam (lam + L_lam)^{-1}``, the exact inverse
    of the Yosida map on an invariant subspace.
    """

    lam: float = 20.0
    t_max: float = 1.0
    quadrature: str = "cubic"
    invert: bool = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not self.t_max > 0:
            raise ValueError("T_max must be positive")
        if self.quadrature not in ("cubic", "linear", "trapezoid"):
            raise ValueError(f"unknown quadrature {self.quadrature!r}")


# --------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    """Constant-input trajectories of the extended system.

    ``states`` is ``(M, K+1, n)``, ``inputs`` is ``(M, m)``; diverged
    trajectories have already been removed (``n_diverged`` counts them).
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    n_diverged: int = 0

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def initial(self) -> tuple[np.ndarray, np.ndarray]:
        return self.states[:, 0], self.inputs


def generate_dataset(sys: ControlAffineSystem, plan: SamplePlan) -> Dataset:
    if plan.domain.dim != sys.n + sys.m:
        raise ValueError(f"domain has dimension {plan.domain.dim}, need n + m = {sys.n + sys.m}")
    rng = np.random.default_rng(plan.seed)
    Z0 = plan.domain.sample(rng, plan.M)
    x0, u = Z0[:, : sys.n], Z0[:, sys.n:]
    r = rollout(sys, x0, u, plan.T, plan.dt)
    keep = ~r.diverged
    n_div = int(np.sum(~keep))
    if n_div:
        log.info("%s: excluded %d of %d diverged trajectories", sys.label, n_div, plan.M)
    if not np.any(keep):
        raise IdentificationError("all sampled trajectories diverged")
    return Dataset(r.times, r.states[keep], u[keep], n_div)


def dataset_from_flow(flow, x0, u, times) -> Dataset:
    """Dataset from an exact flow map ``flow(x0, u, t) -> x(t)``."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    u = np.asarray(u, dtype=float).reshape(x0.shape[0], -1)
    times = np.asarray(times, dtype=float)
    states = np.stack([flow(x0, u, t) for t in times], axis=1)
    return Dataset(times, states, u)


# --------------------------------------------------------------------------
# Yosida transform


def _exp_moments(a: float, top: int) -> np.ndarray:
    """``int_0^1 exp(-a s) s**j ds`` for ``j = 0..top``, stable for any ``a >= 0``."""
    j = np.arange(top + 1)
    if a == 0:
        return 1.0 / (j + 1)
    # regularized lower incomplete gamma: P(j+1, a) * j! / a**(j+1)
    return special.gammainc(j + 1, a) * np.exp(special.gammaln(j + 1) - (j + 1) * np.log(a))


def _product_weights(lam: float, dt: float, K: int, order: int) -> np.ndarray:
    # exact integral of exp(-lam t) against the local Lagrange interpolant
    order = min(order, K)
    mom = _exp_moments(lam * dt, order) * dt
    w = np.zeros(K + 1)
    for k in range(K):
        lo = min(max(k - (order - 1) // 2, 0), K - order)
        nodes = np.arange(lo, lo + order + 1)
        loc = (nodes - k).astype(float)
        decay = np.exp(-lam * dt * k)
        if decay == 0.0:
            break
        for i in range(len(nodes)):
            others = np.delete(loc, i)
            # monomial coefficients of the Lagrange basis polynomial in s
            coef = np.poly(others)[::-1] / np.prod(loc[i] - others)
            w[nodes[i]] += decay * (coef @ mom)
    return w


def yosida_weights(cfg: YosidaConfig, dt: float) -> np.ndarray:
    """Quadrature weights ``w_k`` with ``int_0^T_max e^{-lam t} phi dt ~ sum w_k phi(t_k)``."""
    K = step_count(cfg.t_max, dt)
    if cfg.quadrature == "trapezoid":
        w = dt * np.exp(-cfg.lam * dt * np.arange(K + 1))
        w[0] *= 0.5
        w[-1] *= 0.5
        return w
    return _product_weights(cfg.lam, dt, K, 3 if cfg.quadrature == "cubic" else 1)


def yosida_transform(values, cfg: YosidaConfig, dt: float, axis: int = 0):
    """Truncated Yosida transform of samples ``values`` taken every ``dt``.

    ``values`` holds the observable along one (or many) trajectories with
    time along ``axis``; the grid must reach ``T_max``.
    """
    values = np.asarray(values, dtype=float)
    values = np.moveaxis(values, axis, 0)
    w = yosida_weights(cfg, dt)
    if values.shape[0] < w.size:
        raise ValueError(
            f"time grid covers {(values.shape[0] - 1) * dt:g} s, shorter than T_max = {cfg.t_max:g} s"
        )
    integral = np.tensordot(w, values[: w.size], axes=(0, 0))
    return cfg.lam**2 * integral - cfg.lam * values[0]


def assemble_xy(data: Dataset, d: Dictionary, cfg: YosidaConfig) -> tuple[np.ndarray, np.ndarray]:
    """Design matrix ``X`` (observables at initial states) and Yosida targets ``Y``."""
    if data.M == 0:
        raise IdentificationError("empty dataset")
    w = yosida_weights(cfg, data.dt)
    if data.states.shape[1] < w.size:
        raise ValueError(f"trajectories shorter than T_max = {cfg.t_max}")
    x0, u = data.initial
    X = eval_dictionary(d, x0, u)
    acc = w[0] * X
    # negligible tail of exp(-lam t) contributes nothing at double precision
    active = np.abs(w) > 1e-18 * np.max(np.abs(w))
    for k in range(1, w.size):
        if active[k]:
            acc += w[k] * eval_dictionary(d, data.states[:, k], u)
    Y = cfg.lam**2 * acc - cfg.lam * X
    return X, Y


def fit_generator(X, Y, ridge: float = 0.0) -> np.ndarray:
    M, N = np.shape(X)
    if M < N:
        warnings.warn(f"underdetermined generator fit: {M} samples for {N} observables", stacklevel=2)
    return numerics.solve_least_squares(X, Y, ridge)


def invert_yosida(L_lam: np.ndarray, lam: float) -> np.ndarray:
    """``lam L (lam I + L)^{-1}``: generator from its Yosida approximation."""
    N = L_lam.shape[0]
    # L (lam + L)^{-1} = (lam + L)^{-1} L since the two commute
    return lam * linalg.solve(lam * np.eye(N) + L_lam, L_lam)


# --------------------------------------------------------------------------
# recovered models


def _hexmat(a: np.ndarray) -> list:
    return [[float(v).hex() for v in row] for row in np.atleast_2d(a)]


def _unhexmat(rows) -> np.ndarray:
    return np.array([[float.fromhex(v) for v in row] for row in rows], dtype=float)


@dataclass
class GeneratorModel:
    """Identified generator matrix and the vector field read from it.

    ``f_coeffs`` is ``(N_drift, n)`` over the drift monomials; ``g_coeffs[l]``
    is ``(N_l, n)`` over the monomials with ``q = e_l``. Both are plain
    re-indexings of the coordinate columns of ``L_hat``.
    """

    dictionary: Dictionary
    L_hat: np.ndarray
    provenance: str = "resolvent"
    config: dict = field(default_factory=dict)
    valid: bool = True
    reason: str = ""

    def __post_init__(self):
        d = self.dictionary
        drift, inputs = eval_monomial_split(d)
        slots = list(d.coordinate_slots)
        self._drift = drift
        self._inputs = inputs
        self._drift_exp = state_exponents(d, drift)
        self._input_exp = [state_exponents(d, b) for b in inputs]
        self.f_coeffs = self.L_hat[np.ix_(drift, slots)]
        self.g_coeffs = [self.L_hat[np.ix_(b, slots)] for b in inputs]

    @property
    def n(self) -> int:
        return self.dictionary.n

    @property
    def m(self) -> int:
        return self.dictionary.m

    def f(self, x) -> np.ndarray:
        return eval_state_monomials(self._drift_exp, x) @ self.f_coeffs

    def g(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        cols = [eval_state_monomials(e, x) @ c for e, c in zip(self._input_exp, self.g_coeffs)]
        if not cols:
            return np.zeros(x.shape[:-1] + (self.n, 0))
        return np.stack(cols, axis=-1)

    def linearization(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact Jacobian ``(A, B)`` of ``f_hat`` and ``g_hat(0)`` at the origin."""
        A = np.zeros((self.n, self.n))
        for r, e in enumerate(self._drift_exp):
            if e.sum() == 1:
                A[:, int(np.argmax(e))] = self.f_coeffs[r]
        B = np.zeros((self.n, self.m))
        for l, exps in enumerate(self._input_exp):
            for r, e in enumerate(exps):
                if e.sum() == 0:
                    B[:, l] = self.g_coeffs[l][r]
        return A, B

    def as_system(self, label: Optional[str] = None) -> ControlAffineSystem:
        return ControlAffineSystem(self.n, self.m, self.f, self.g, label or f"identified[{self.provenance}]")

    def predict(self, x, u) -> np.ndarray:
        """``sum_k phi_k(x, u) L_hat[k, slot_j]`` for every coordinate ``j``."""
        return eval_dictionary(self.dictionary, x, u) @ self.L_hat[:, list(self.dictionary.coordinate_slots)]

    def to_dict(self) -> dict:
        rule = self.dictionary.rule
        return {
            "kind": "generator_model",
            "provenance": self.provenance,
            "n": self.n,
            "m": self.m,
            "rule": rule.to_dict() if rule is not None else None,
            "dictionary": self.dictionary.to_records(),
            "L_hat": _hexmat(self.L_hat),
            "config": self.config,
            "valid": self.valid,
            "reason": self.reason,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorModel":
        rule = rule_from_dict(data["rule"]) if data.get("rule") else None
        d = Dictionary.from_records(data["dictionary"], data["n"], data["m"], rule)
        return cls(d, _unhexmat(data["L_hat"]), data["provenance"], data.get("config", {}),
                   data.get("valid", True), data.get("reason", ""))

    @classmethod
    def from_json(cls, text: str) -> "GeneratorModel":
        return cls.from_dict(json.loads(text))


def recover_vector_field(L_hat, d: Dictionary, provenance: str = "resolvent", config=None) -> GeneratorModel:
    L_hat = np.asarray(L_hat, dtype=float)
    if L_hat.shape != (d.N, d.N):
        raise ValueError(f"L_hat has shape {L_hat.shape}, dictionary has N = {d.N}")
    return GeneratorModel(d, L_hat, provenance, dict(config or {}))


def identify_resolvent(data: Dataset, d: Dictionary, cfg: YosidaConfig, ridge: float = 0.0) -> GeneratorModel:
    """Full resolvent-based identification: assemble, fit, recover."""
    X, Y = assemble_xy(data, d, cfg)
    L_hat = fit_generator(X, Y, ridge)
    if cfg.invert:
        L_hat = invert_yosida(L_hat, cfg.lam)
    return recover_vector_field(L_hat, d, "resolvent", {"yosida": asdict(cfg), "ridge": ridge, "M": data.M})


def identify_logarithm(data: Dataset, d: Dictionary, dt_step: Optional[float] = None,
                       chunk: int = 20000, max_steps: Optional[int] = None) -> GeneratorModel:
    """Logarithm baseline: one-step Koopman matrix by EDMD, then ``log(U) / dt``.

    All consecutive sample pairs of all trajectories are pooled; ``max_steps``
    optionally limits how many steps per trajectory are used.
    """
    dt = data.dt if dt_step is None else dt_step
    K = data.states.shape[1] - 1
    if max_steps is not None:
        K = min(K, max_steps)
    u = data.inputs
    ls = numerics.StreamingLeastSquares(d.N, d.N)
    per = max(1, chunk // max(data.M, 1))
    prev = eval_dictionary(d, data.states[:, 0], u)
    buf_a, buf_b = [], []
    for k in range(1, K + 1):
        nxt = eval_dictionary(d, data.states[:, k], u)
        buf_a.append(prev)
        buf_b.append(nxt)
        prev = nxt
        if len(buf_a) >= per or k == K:
            ls.add(np.vstack(buf_a), np.vstack(buf_b))
            buf_a, buf_b = [], []
    U_hat = ls.solve()
    cfg = {"dt": dt, "steps": K, "M": data.M}
    try:
        L_hat = numerics.matrix_log(U_hat) / dt
    except numerics.MatrixLogError as exc:
        log.warning("logarithm baseline failed: %s", exc)
        model = recover_vector_field(np.full((d.N, d.N), np.nan), d, "logarithm", cfg)
        model.valid = False
        model.reason = str(exc)
        return model
    return recover_vector_field(L_hat, d, "logarithm", cfg)


@dataclass
class LiftedLinearModel:
    """``zdot = A z + B u`` over state-only observables ``z = phi(x)``."""

    A: np.ndarray
    B: np.ndarray
    dict_x: Dictionary
    provenance: str = "lifted_linear"

    def __post_init__(self):
        slots = list(self.dict_x.coordinate_slots)
        self._exp = state_exponents(self.dict_x, range(self.dict_x.N))
        self._rows_A = self.A[slots]
        self._rows_B = self.B[slots]
        self.valid = True
        self.reason = ""

    @property
    def n(self) -> int:
        return self.dict_x.n

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def f(self, x) -> np.ndarray:
        return eval_state_monomials(self._exp, x) @ self._rows_A.T

    def g(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._rows_B, x.shape[:-1] + self._rows_B.shape).copy()

    def as_system(self, label: Optional[str] = None) -> ControlAffineSystem:
        return ControlAffineSystem(self.n, self.m, self.f, self.g, label or "identified[lifted_linear]")


def identify_lifted_linear(data: Dataset, dict_x: Dictionary, cfg: YosidaConfig,
                           ridge: float = 0.0) -> LiftedLinearModel:
    """Lifted-linear baseline fitted with the same Yosida targets.

    Regresses the Yosida transform of the state-only observables on
    ``[phi(x0), u0]``; ``g_hat`` is constant in ``x`` by construction.
    """
    if dict_x.m != 0:
        raise ValueError("lifted-linear model needs a state-only dictionary")
    n, m = dict_x.n, data.inputs.shape[1]
    x0, u = data.initial
    w = yosida_weights(cfg, data.dt)
    Z0 = eval_dictionary(dict_x, x0)
    acc = w[0] * Z0
    for k in range(1, w.size):
        acc += w[k] * eval_dictionary(dict_x, data.states[:, k])
    Y = cfg.lam**2 * acc - cfg.lam * Z0
    C = fit_generator(np.hstack([Z0, u]), Y, ridge)
    Nx = dict_x.N
    if cfg.invert:
        # u is constant, so the extended generator has zero rows for u
        ext = np.zeros((Nx + m, Nx + m))
        ext[:, :Nx] = C
        ext = invert_yosida(ext, cfg.lam)
        C = ext[:, :Nx]
    return LiftedLinearModel(C[:Nx].T.copy(), C[Nx:].T.copy(), dict_x)


def lifted_dictionary(n: int, rule) -> Dictionary:
    return enumerate_dictionary(n, 0, rule)


def evaluate_model_errors(true_sys: ControlAffineSystem, model, n_test: int, domain: Box,
                          seed: int) -> tuple[float, float]:
    """Mean elementwise-L1 errors ``(E_f, E_g)`` at uniform test states."""
    if domain.dim != true_sys.n:
        domain = domain.head(true_sys.n)
    rng = np.random.default_rng(seed)
    x = domain.sample(rng, n_test)
    if not getattr(model, "valid", True):
        return float("nan"), float("nan")
    ef = np.abs(true_sys.f(x) - model.f(x)).reshape(n_test, -1).sum(axis=1).mean()
    eg = np.abs(true_sys.g(x) - model.g(x)).reshape(n_test, -1).sum(axis=1).mean()
    return float(ef), float(eg)
