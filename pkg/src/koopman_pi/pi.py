"""Policy iteration with random-feature value functions.

Policy evaluation solves the generalized HJB equation

    Q(x) + k(x)^T R k(x) + DV(x) (f(x) + g(x) k(x)) = 0

in the least-squares sense over collocation points, with
``V(x) = beta^T (sigma(W x + b) - sigma(b))``. ``W`` and ``b`` are drawn once
and frozen, so each evaluation is a linear least-squares problem in ``beta``.
Policy improvement is the closed form ``k(x) = -1/2 R^{-1} g(x)^T DV(x)^T``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg

from . import numerics
from .dynamics import LinearGain, Policy, ValueGradient, ZeroPolicy

log = logging.getLogger(__name__)


class PolicyIterationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``L(x, u) = x^T Qx x + u^T R u``."""

    Qx: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Qx = np.atleast_2d(np.asarray(self.Qx, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, mat in (("Qx", Qx), ("R", R)):
            if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, rtol=0, atol=1e-12):
                raise ValueError(f"{name} must be a symmetric matrix")
            if np.min(linalg.eigvalsh(mat)) <= 0:
                raise ValueError(f"{name} must be positive definite")
        object.__setattr__(self, "Qx", Qx)
        object.__setattr__(self, "R", R)

    @classmethod
    def identity(cls, n: int, m: int) -> "CostSpec":
        return cls(np.eye(n), np.eye(m))

    def state_cost(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.Qx, x)

    def input_cost(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.einsum("...i,ij,...j->...", u, self.R, u)

    def running(self, x, u) -> np.ndarray:
        return self.state_cost(x) + self.input_cost(u)


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z: 0.5 * (1.0 + np.tanh(0.5 * z))),
}


@dataclass
class ValueNetwork:
    """``V(x) = beta^T (sigma(W x + b) - sigma(b))``, so ``V(0) = 0`` exactly."""

    W: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    activation: str = "tanh"
    seed: Optional[int] = None
    domain: Optional[list] = None

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.beta = np.asarray(self.beta, dtype=float).ravel()

    @property
    def s(self) -> int:
        return self.W.shape[0]

    @property
    def n(self) -> int:
        return self.W.shape[1]

    def _pre(self, x):
        return np.asarray(x, dtype=float) @ self.W.T + self.b

    def features(self, x) -> np.ndarray:
        sigma = _ACTIVATIONS[self.activation][0]
        return sigma(self._pre(x)) - sigma(self.b)

    def __call__(self, x) -> np.ndarray:
        return self.features(x) @ self.beta

    value = __call__

    def grad(self, x) -> np.ndarray:
        """``DV(x) = beta^T diag(sigma'(W x + b)) W``, batched over leading axes."""
        dsigma = _ACTIVATIONS[self.activation][1]
        return (dsigma(self._pre(x)) * self.beta) @ self.W

    def directional_features(self, x, v) -> np.ndarray:
        """Coefficient of ``beta`` in ``DV(x) v``: ``sigma'(W x + b) * (W v)``."""
        dsigma = _ACTIVATIONS[self.activation][1]
        return dsigma(self._pre(x)) * (np.asarray(v, dtype=float) @ self.W.T)

    def with_beta(self, beta) -> "ValueNetwork":
        return replace(self, beta=np.asarray(beta, dtype=float).copy())

    def to_dict(self) -> dict:
        return {
            "kind": "value_network",
            "activation": self.activation,
            "seed": self.seed,
            "domain": self.domain,
            "W": [[float(v).hex() for v in row] for row in self.W],
            "b": [float(v).hex() for v in self.b],
            "beta": [float(v).hex() for v in self.beta],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ValueNetwork":
        hx = float.fromhex
        return cls(
            np.array([[hx(v) for v in row] for row in d["W"]]),
            np.array([hx(v) for v in d["b"]]),
            np.array([hx(v) for v in d["beta"]]),
            d.get("activation", "tanh"),
            d.get("seed"),
            d.get("domain"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ValueNetwork":
        return cls.from_dict(json.loads(text))


def init_value_network(s: int, n: int, seed: int, activation: str = "tanh",
                       input_scale: float = 1.0) -> ValueNetwork:
    """Random features: ``W ~ N(0, 1) * input_scale / sqrt(n)``, ``b ~ U[-1, 1]``, ``beta = 0``.

    ``input_scale`` rescales the weights for domains far from unit size so
    that pre-activations stay of order one.
    """
    if s < 1 or n < 1:
        raise ValueError("need s >= 1 features and n >= 1 inputs")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((s, n)) * (input_scale / np.sqrt(n))
    b = rng.uniform(-1.0, 1.0, size=s)
    return ValueNetwork(W, b, np.zeros(s), activation, seed)


# --------------------------------------------------------------------------
# model helpers


def linearize(model, h: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """``(A, B)`` at the origin; exact for models exposing ``linearization()``."""
    if hasattr(model, "linearization"):
        return model.linearization()
    n = model.n
    A = np.zeros((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        A[:, k] = (model.f(e) - model.f(-e)) / (2 * h)
    B = np.asarray(model.g(np.zeros(n))).reshape(n, -1)
    return A, B


def initial_policy(model, cost: CostSpec) -> LinearGain:
    """LQR gain of the linearization of ``(f_hat, g_hat)`` at the origin."""
    A, B = linearize(model)
    try:
        K, _ = numerics.lqr_gain(A, B, cost.Qx, cost.R)
    except (numerics.RiccatiError, numerics.NotHurwitzError, linalg.LinAlgError) as exc:
        raise PolicyIterationError(
            f"could not build an initial stabilizing policy ({exc}); supply one explicitly"
        ) from exc
    if not numerics.is_hurwitz(A - B @ K):
        raise PolicyIterationError("LQR gain does not stabilize the linearization; supply an initial policy")
    return LinearGain(K)


def closed_loop_field(model, policy: Policy, x) -> tuple[np.ndarray, np.ndarray]:
    """``(f(x) + g(x) k(x), k(x))``."""
    u = policy(x)
    return model.f(x) + np.einsum("...ij,...j->...i", model.g(x), u), u


# --------------------------------------------------------------------------
# policy evaluation / improvement


def ghjb_system(vnet: ValueNetwork, policy: Policy, model, cost: CostSpec, samples):
    """Design matrix and right-hand side of the GHJB least-squares problem."""
    F, u = closed_loop_field(model, policy, samples)
    A = vnet.directional_features(samples, F)
    rhs = -(cost.state_cost(samples) + cost.input_cost(u))
    return A, rhs


def ghjb_fit(vnet: ValueNetwork, policy: Policy, model, cost: CostSpec, samples,
             ridge: Optional[float] = None, ridge_factor: float = 1e-8,
             solver: str = "normal") -> ValueNetwork:
    """Fit ``beta`` for the given policy; returns a new network.

    ``ridge=None`` uses ``ridge_factor * trace(A^T A) / s``. ``solver`` is
    ``"normal"`` (Cholesky on the regularized normal equations) or ``"qr"``.
    """
    A, rhs = ghjb_system(vnet, policy, model, cost, samples)
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(rhs)):
        raise PolicyIterationError("non-finite GHJB design (policy or model blew up on the samples)")
    if not np.any(A):
        raise PolicyIterationError("GHJB design matrix is identically zero")
    if ridge is None:
        ridge = numerics.relative_ridge(A, ridge_factor)
    if solver == "normal" and ridge > 0:
        beta = numerics.solve_ridge_normal(A, rhs, ridge)
    elif solver in ("normal", "qr"):
        beta = numerics.solve_least_squares(A, rhs, ridge)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return vnet.with_beta(beta)


def ghjb_residual(vnet: ValueNetwork, policy: Policy, model, cost: CostSpec, samples) -> np.ndarray:
    """Pointwise ``L(x, k(x)) + DV(x) (f + g k)``."""
    F, u = closed_loop_field(model, policy, samples)
    return cost.running(samples, u) + np.einsum("...i,...i->...", vnet.grad(samples), F)


def policy_improve(vnet: ValueNetwork, model, cost: CostSpec) -> ValueGradient:
    return ValueGradient(vnet, model.g, cost.R)


# --------------------------------------------------------------------------
# iteration


@dataclass(frozen=True)
class PiConfig:
    domain: tuple  # (lo, hi) state box
    s: int = 200
    samples: int = 3000
    max_iter: int = 50
    tol: float = 1e-6
    seed: int = 0
    activation: str = "tanh"
    input_scale: float = 1.0
    ridge_factor: float = 1e-8
    exclusion_radius: float = 1e-8
    solver: str = "normal"


@dataclass
class PiState:
    iter: int
    vnet: ValueNetwork
    policy: Policy
    residual_history: list = field(default_factory=list)
    hjb_residual_history: list = field(default_factory=list)
    beta_delta_history: list = field(default_factory=list)
    converged: bool = False
    error: Optional[str] = None

    def history_rows(self) -> list[tuple]:
        return list(zip(range(1, len(self.residual_history) + 1), self.residual_history,
                        self.hjb_residual_history, self.beta_delta_history))

    def history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "ghjb_residual_rms", "hjb_residual_rms", "beta_delta"])
            for row in self.history_rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def collocation_samples(domain, count: int, seed: int, exclusion_radius: float = 1e-8) -> np.ndarray:
    lo, hi = (np.asarray(v, dtype=float) for v in domain)
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=(count, lo.size))
    keep = np.linalg.norm(x, axis=1) > exclusion_radius
    return x[keep]


def policy_iteration(model, cost: CostSpec, cfg: PiConfig, initial: Optional[Policy] = None) -> PiState:
    """Alternate GHJB fits and closed-form improvements until ``beta`` settles.

    The stopping rule is ``||beta_i - beta_{i-1}|| / max(1, ||beta_{i-1}||) <= tol``.
    Two residuals are recorded per iteration on the collocation set: the GHJB
    residual of ``V_i`` under the policy it evaluates, and the same residual
    under the improved policy (the HJB residual, which vanishes at the
    optimum).
    """
    n = model.n
    policy = initial if initial is not None else initial_policy(model, cost)
    lo, hi = (np.asarray(v, dtype=float) for v in cfg.domain)
    vnet = init_value_network(cfg.s, n, cfg.seed, cfg.activation, cfg.input_scale)
    vnet.domain = [lo.tolist(), hi.tolist()]
    samples = collocation_samples((lo, hi), cfg.samples, cfg.seed + 1, cfg.exclusion_radius)
    state = PiState(0, vnet, policy)
    prev_beta = vnet.beta
    for i in range(1, cfg.max_iter + 1):
        try:
            fitted = ghjb_fit(vnet, policy, model, cost, samples, ridge_factor=cfg.ridge_factor, solver=cfg.solver)
            improved = policy_improve(fitted, model, cost)
            res = ghjb_residual(fitted, policy, model, cost, samples)
            hjb = ghjb_residual(fitted, improved, model, cost, samples)
        except (PolicyIterationError, ValueError, linalg.LinAlgError, FloatingPointError) as exc:
            log.warning("policy iteration stopped at iteration %d: %s", i, exc)
            state.error = str(exc)
            return state
        delta = float(np.linalg.norm(fitted.beta - prev_beta) / max(1.0, np.linalg.norm(prev_beta)))
        state.iter = i
        state.vnet = fitted
        state.policy = improved
        state.residual_history.append(float(np.sqrt(np.mean(res**2))))
        state.hjb_residual_history.append(float(np.sqrt(np.mean(hjb**2))))
        state.beta_delta_history.append(delta)
        log.debug("PI iter %d: ghjb %.3e hjb %.3e dbeta %.3e", i, state.residual_history[-1],
                  state.hjb_residual_history[-1], delta)
        if delta <= cfg.tol:
            state.converged = True
            break
        policy = improved
        vnet = fitted
        prev_beta = fitted.beta
    return state
