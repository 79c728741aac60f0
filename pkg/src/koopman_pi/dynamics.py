"""Control-affine systems, feedback policies and fixed-step RK4 rollouts.

All vector fields are batched: ``f`` maps ``(..., n) -> (..., n)`` and ``g``
maps ``(..., n) -> (..., n, m)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

DIVERGENCE_BOUND = 1e6


@dataclass(frozen=True)
class ControlAffineSystem:
    """``xdot = f(x) + g(x) u`` with batched ``f`` and ``g``."""

    n: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    label: str = "system"
    input_offset: Optional[np.ndarray] = None  # u_phys = u + input_offset

    def __call__(self, x, u) -> np.ndarray:
        return self.vector_field(x, u)

    def vector_field(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return self.f(x) + np.einsum("...ij,...j->...i", self.g(x), u)

    def check_equilibrium(self, atol: float = 1e-12) -> None:
        f0 = self.f(np.zeros(self.n))
        if not np.all(np.abs(f0) <= atol):
            raise ValueError(f"{self.label}: f(0) = {f0} is not zero")


# --------------------------------------------------------------------------
# policies


class Policy:
    """Batched state feedback ``u = kappa(x)`` with ``kappa(0) = 0``."""

    m: int

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class ZeroPolicy(Policy):
    m: int

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.m,))


@dataclass(frozen=True)
class LinearGain(Policy):
    """``u = -K x``."""

    K: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))

    @property
    def m(self) -> int:
        return self.K.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return -np.einsum("ij,...j->...i", self.K, x)


@dataclass(frozen=True)
class ValueGradient(Policy):
    """``u = -1/2 R^{-1} g(x)^T DV(x)^T``, exactly zero at the origin.

    ``value`` is anything with a batched ``grad(x)`` method (a
    :class:`koopman_pi.pi.ValueNetwork`), ``g`` the input gain of the model
    the value function was computed for.
    """

    value: object
    g: Callable[[np.ndarray], np.ndarray]
    R: np.ndarray

    @property
    def m(self) -> int:
        return np.atleast_2d(self.R).shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        dv = self.value.grad(x)
        gtdv = np.einsum("...ij,...i->...j", self.g(x), dv)
        R = np.atleast_2d(self.R)
        u = -0.5 * np.linalg.solve(R, gtdv[..., None])[..., 0] if R.shape[0] > 1 else -0.5 * gtdv / R[0, 0]
        at_origin = np.all(x == 0.0, axis=-1)
        if np.any(at_origin):
            u = np.where(at_origin[..., None], 0.0, u)
        return u


def eval_policy(pol: Policy, x) -> np.ndarray:
    return pol(x)


# --------------------------------------------------------------------------
# integration


@dataclass
class Trajectory:
    """One rollout on a uniform grid.

    ``inputs[k]`` is the input applied at ``times[k]`` (constant inputs are
    repeated). When the rollout diverged, ``states`` is truncated before the
    first non-finite or out-of-bound step and ``diverged_at`` holds that
    step index.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    diverged_at: Optional[int] = None
    input_offset: Optional[np.ndarray] = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def physical_inputs(self) -> np.ndarray:
        if self.input_offset is None:
            return self.inputs
        return self.inputs + self.input_offset

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{j + 1}" for j in range(n)] + [f"u{l + 1}" for l in range(m)])
            for t, x, u in zip(self.times, self.states, self.inputs):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])


@dataclass
class Rollout:
    """Batch of trajectories sharing one time grid.

    ``states`` has shape ``(B, K+1, n)``; rows of diverged trajectories are
    NaN from the divergence index on.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    diverged_at: np.ndarray  # -1 where the trajectory stayed bounded
    cost: Optional[np.ndarray] = None  # (B, K+1) accumulated running cost, if requested

    @property
    def diverged(self) -> np.ndarray:
        return self.diverged_at >= 0

    def trajectory(self, i: int, input_offset=None) -> Trajectory:
        d = int(self.diverged_at[i])
        stop = None if d < 0 else d
        return Trajectory(
            self.times[:stop], self.states[i, :stop], self.inputs[i, :stop],
            None if d < 0 else d, input_offset,
        )


def step_count(T: float, dt: float) -> int:
    if dt <= 0 or T < dt * (1 - 1e-12):
        raise ValueError(f"need dt > 0 and T >= dt, got T={T}, dt={dt}")
    K = int(round(T / dt))
    if abs(K * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"horizon {T} is not an integer number of steps {dt}")
    return K


def rollout(
    sys: ControlAffineSystem,
    x0,
    control,
    T: float,
    dt: float,
    divergence_bound: float = DIVERGENCE_BOUND,
    running_cost=None,
) -> Rollout:
    """Classical RK4 for a batch of initial states.

    ``control`` is either an input array broadcastable to ``(B, m)`` held
    constant, or a :class:`Policy` re-evaluated at every RK stage.
    ``running_cost(x, u) -> (B,)``, if given, is integrated alongside the
    state with the same RK4 stages into :attr:`Rollout.cost`.
    """
    X = np.atleast_2d(np.asarray(x0, dtype=float))
    B, n = X.shape
    if n != sys.n:
        raise ValueError(f"x0 has dimension {n}, system has {sys.n}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite initial state")
    K = step_count(T, dt)
    times = dt * np.arange(K + 1)
    is_policy = isinstance(control, Policy) or callable(control)
    if not is_policy:
        U = np.broadcast_to(np.asarray(control, dtype=float), (B, sys.m))

    def stage(x, rows):
        u = control(x) if is_policy else U[rows]
        dx = sys.f(x) + np.einsum("...ij,...j->...i", sys.g(x), u)
        c = running_cost(x, u) if running_cost is not None else None
        return dx, u, c

    states = np.full((B, K + 1, n), np.nan)
    inputs = np.full((B, K + 1, sys.m), np.nan)
    cost = None
    if running_cost is not None:
        cost = np.full((B, K + 1), np.nan)
        cost[:, 0] = 0.0
    states[:, 0] = X
    diverged_at = np.full(B, -1, dtype=np.int64)
    active = np.arange(B)
    x = X.copy()
    acc = np.zeros(B)
    h = dt
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            if active.size == 0:
                break
            k1, u1, c1 = stage(x, active)
            inputs[active, k] = u1
            k2, _, c2 = stage(x + 0.5 * h * k1, active)
            k3, _, c3 = stage(x + 0.5 * h * k2, active)
            k4, _, c4 = stage(x + h * k3, active)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if cost is not None:
                acc = acc + (h / 6.0) * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
            bad = ~np.all(np.isfinite(x), axis=1) | (np.max(np.abs(x), axis=1) > divergence_bound)
            if np.any(bad):
                diverged_at[active[bad]] = k + 1
                x = x[~bad]
                acc = acc[~bad]
                active = active[~bad]
            states[active, k + 1] = x
            if cost is not None:
                cost[active, k + 1] = acc
        if active.size:
            inputs[active, K] = control(x) if is_policy else U[active]
    ndiv = int(np.sum(diverged_at >= 0))
    if ndiv:
        log.debug("%s: %d of %d rollouts diverged", sys.label, ndiv, B)
    return Rollout(times, states, inputs, diverged_at, cost)


def integrate(sys, x0, control, T: float, dt: float, divergence_bound: float = DIVERGENCE_BOUND) -> Trajectory:
    """Single-trajectory RK4 rollout; see :func:`rollout`."""
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if not isinstance(control, Policy) and not callable(control):
        control = np.asarray(control, dtype=float).reshape(1, -1)
    r = rollout(sys, x0, control, T, dt, divergence_bound)
    return r.trajectory(0, sys.input_offset)


# --------------------------------------------------------------------------
# benchmarks


@dataclass(frozen=True)
class PendulumParams:
    """Inverted pendulum, ``theta = 0`` upright.

    Defaults are the normalized model (``gravity / length = 1``) so that the
    unit identification box is a meaningful operating region; pass
    ``gravity=9.81`` for the physically scaled variant.
    """

    mass: float = 1.0
    length: float = 1.0
    gravity: float = 1.0
    damping: float = 0.1


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    gravity: float = 9.81


@dataclass(frozen=True)
class Quad2DParams:
    mass: float = 1.0
    inertia: float = 0.1
    gravity: float = 9.81


@dataclass(frozen=True)
class Quad3DParams:
    mass: float = 1.0
    gravity: float = 9.81


def _check_positive(params, allow_zero=("damping",)):
    for f in fields(params):
        v = getattr(params, f.name)
        if not np.isfinite(v) or v < 0 or (v == 0 and f.name not in allow_zero):
            raise ValueError(f"non-physical parameter {f.name}={v}")


def pendulum(params: PendulumParams = PendulumParams()) -> ControlAffineSystem:
    _check_positive(params)
    a = params.gravity / params.length
    c = params.damping / (params.mass * params.length**2)
    b = 1.0 / (params.mass * params.length**2)

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 1], a * np.sin(x[..., 0]) - c * x[..., 1]], axis=-1)

    def g(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 1))
        out[..., 1, 0] = b
        return out

    return ControlAffineSystem(2, 1, f, g, "pendulum")


def cartpole(params: CartpoleParams = CartpoleParams()) -> ControlAffineSystem:
    """Frictionless cart-pole, state ``(z, theta, zdot, thetadot)``, force input."""
    _check_positive(params, allow_zero=())
    M, mp, l, gr = params.cart_mass, params.pole_mass, params.half_length, params.gravity
    Mt = M + mp

    def parts(x):
        x = np.asarray(x, dtype=float)
        th, thd = x[..., 1], x[..., 3]
        s, c = np.sin(th), np.cos(th)
        D = l * (4.0 / 3.0 - mp * c**2 / Mt)
        thdd_f = (gr * s - c * mp * l * thd**2 * s / Mt) / D
        thdd_g = -c / (Mt * D)
        zdd_f = mp * l * thd**2 * s / Mt - mp * l * thdd_f * c / Mt
        zdd_g = 1.0 / Mt - mp * l * thdd_g * c / Mt
        return x, thdd_f, thdd_g, zdd_f, zdd_g

    def f(x):
        x, thdd_f, _, zdd_f, _ = parts(x)
        return np.stack([x[..., 2], x[..., 3], zdd_f, thdd_f], axis=-1)

    def g(x):
        x, _, thdd_g, _, zdd_g = parts(x)
        out = np.zeros(x.shape[:-1] + (4, 1))
        out[..., 2, 0] = zdd_g
        out[..., 3, 0] = thdd_g
        return out

    return ControlAffineSystem(4, 1, f, g, "cartpole")


def quad2d(params: Quad2DParams = Quad2DParams()) -> ControlAffineSystem:
    """Planar quadrotor ``(y, z, theta, ydot, zdot, thetadot)``.

    Inputs are the thrust deviation from hover and the torque.
    """
    _check_positive(params, allow_zero=())
    m, J, gr = params.mass, params.inertia, params.gravity

    def f(x):
        x = np.asarray(x, dtype=float)
        th = x[..., 2]
        return np.stack(
            [x[..., 3], x[..., 4], x[..., 5], -gr * np.sin(th), gr * (np.cos(th) - 1.0), np.zeros_like(th)],
            axis=-1,
        )

    def g(x):
        x = np.asarray(x, dtype=float)
        th = x[..., 2]
        out = np.zeros(x.shape[:-1] + (6, 2))
        out[..., 3, 0] = -np.sin(th) / m
        out[..., 4, 0] = np.cos(th) / m
        out[..., 5, 1] = 1.0 / J
        return out

    return ControlAffineSystem(6, 2, f, g, "quad2d", input_offset=np.array([m * gr, 0.0]))


def quad3d(params: Quad3DParams = Quad3DParams()) -> ControlAffineSystem:
    """Reduced quadrotor: position, velocity, ZYX Euler angles (9 states).

    Inputs are the thrust deviation from hover and the three body rates.
    """
    _check_positive(params, allow_zero=())
    m, gr = params.mass, params.gravity

    def thrust_dir(x):
        ph, th, ps = x[..., 6], x[..., 7], x[..., 8]
        cph, sph, cth, sth, cps, sps = np.cos(ph), np.sin(ph), np.cos(th), np.sin(th), np.cos(ps), np.sin(ps)
        return np.stack([cph * sth * cps + sph * sps, cph * sth * sps - sph * cps, cph * cth], axis=-1)

    def f(x):
        x = np.asarray(x, dtype=float)
        d = thrust_dir(x)
        acc = gr * d
        acc[..., 2] -= gr
        return np.concatenate([x[..., 3:6], acc, np.zeros_like(x[..., 6:9])], axis=-1)

    def g(x):
        x = np.asarray(x, dtype=float)
        ph, th = x[..., 6], x[..., 7]
        cph, sph, cth, tth = np.cos(ph), np.sin(ph), np.cos(th), np.tan(th)
        out = np.zeros(x.shape[:-1] + (9, 4))
        out[..., 3:6, 0] = thrust_dir(x) / m
        out[..., 6, 1] = 1.0
        out[..., 6, 2] = sph * tth
        out[..., 6, 3] = cph * tth
        out[..., 7, 2] = cph
        out[..., 7, 3] = -sph
        out[..., 8, 2] = sph / cth
        out[..., 8, 3] = cph / cth
        return out

    return ControlAffineSystem(9, 4, f, g, "quad3d", input_offset=np.array([m * gr, 0.0, 0.0, 0.0]))


BENCHMARKS = {
    "pendulum": (pendulum, PendulumParams),
    "cartpole": (cartpole, CartpoleParams),
    "quad2d": (quad2d, Quad2DParams),
    "quad3d": (quad3d, Quad3DParams),
}


def benchmark(name: str, params: dict | None = None) -> ControlAffineSystem:
    """Build a benchmark by name; ``params`` overrides the default parameters."""
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    make, P = BENCHMARKS[name]
    known = {f.name for f in fields(P)}
    params = dict(params or {})
    extra = set(params) - known
    if extra:
        raise ValueError(f"unknown {name} parameters: {sorted(extra)}")
    sys = make(P(**{k: float(v) for k, v in params.items()}))
    sys.check_equilibrium()
    return sys


def linear_system(A, B, label: str = "linear") -> ControlAffineSystem:
    """``xdot = A x + B u``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)

    def f(x):
        return np.einsum("ij,...j->...i", A, np.asarray(x, dtype=float))

    def g(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(B, x.shape[:-1] + B.shape)

    return ControlAffineSystem(A.shape[0], B.shape[1], f, g, label)
