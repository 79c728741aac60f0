"""Closed-loop evaluation of learned controllers on the true system."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import identify
from .dynamics import ControlAffineSystem, Policy, Rollout, rollout
from .pi import CostSpec

log = logging.getLogger(__name__)


@dataclass
class CostCurve:
    """Accumulated running cost ``C(t) = int_0^t L(x, u) dtau`` per trajectory.

    ``values`` is ``(B, K+1)``; rows of diverged rollouts are NaN after the
    divergence step and excluded from :attr:`mean`.
    """

    times: np.ndarray
    values: np.ndarray
    diverged: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        ok = ~self.diverged
        if not np.any(ok):
            return np.full(self.times.shape, np.nan)
        return self.values[ok].mean(axis=0)


def cost_curves(sys: ControlAffineSystem, pol: Policy, x0, cost: CostSpec, T_eval: float,
                dt: float) -> tuple[CostCurve, Rollout]:
    # the cost rides along as an extra RK4 state: non-negative stage weights keep it monotone
    r = rollout(sys, np.atleast_2d(x0), pol, T_eval, dt, running_cost=cost.running)
    values = r.cost
    ndiv = int(np.sum(r.diverged))
    if ndiv:
        log.info("%d of %d closed-loop rollouts diverged", ndiv, len(r.diverged))
    return CostCurve(r.times, values, r.diverged.copy()), r


def accumulated_cost(sys, pol, x0, cost, T_eval: float = 10.0, dt: float = 0.01) -> CostCurve:
    """Single-trajectory cost curve, integrated with the same RK4 stages as the state."""
    curve, _ = cost_curves(sys, pol, np.asarray(x0, dtype=float).reshape(1, -1), cost, T_eval, dt)
    return curve


@dataclass
class CostComparison:
    times: np.ndarray
    mean_C_hat: np.ndarray
    mean_C: np.ndarray
    kept: np.ndarray
    x0: np.ndarray
    rollout_hat: Rollout
    rollout_true: Rollout
    curves_hat: CostCurve
    curves_true: CostCurve

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.mean_C_hat - self.mean_C)

    @property
    def n_dropped(self) -> int:
        return int(np.sum(~self.kept))


def cost_comparison(true_sys: ControlAffineSystem, pol_identified: Policy, pol_true: Policy,
                    cost: CostSpec, domain: identify.Box, n_traj: int = 50, T_eval: float = 10.0,
                    dt: float = 0.01, seed: int = 0) -> CostComparison:
    """Roll both policies out on the true system from the same seeded initial states.

    An initial state is dropped for both policies if either rollout diverges.
    """
    if domain.dim != true_sys.n:
        domain = domain.head(true_sys.n)
    x0 = domain.sample(np.random.default_rng(seed), n_traj)
    ch, rh = cost_curves(true_sys, pol_identified, x0, cost, T_eval, dt)
    ct, rt = cost_curves(true_sys, pol_true, x0, cost, T_eval, dt)
    kept = ~(ch.diverged | ct.diverged)
    if not np.all(kept):
        log.info("dropped %d of %d initial states (divergence)", int(np.sum(~kept)), n_traj)
    if np.any(kept):
        mh = ch.values[kept].mean(axis=0)
        mt = ct.values[kept].mean(axis=0)
    else:
        mh = mt = np.full(ch.times.shape, np.nan)
    return CostComparison(ch.times, mh, mt, kept, x0, rh, rt, ch, ct)


def stabilization_check(states, threshold: float = 1e-2, t_check: Optional[float] = None,
                        times=None) -> float:
    """Fraction of trajectories with ``||x(t_check)|| <= threshold``.

    ``states`` is ``(B, K+1, n)`` (or a :class:`Rollout`); by default the
    final time is checked. Diverged (NaN) trajectories count as failures.
    """
    if isinstance(states, Rollout):
        times = states.times
        states = states.states
    states = np.asarray(states, dtype=float)
    if states.shape[0] == 0:
        return float("nan")
    k = states.shape[1] - 1
    if t_check is not None and times is not None:
        k = int(np.argmin(np.abs(np.asarray(times) - t_check)))
    norms = np.linalg.norm(states[:, k], axis=-1)
    return float(np.mean(np.nan_to_num(norms, nan=np.inf) <= threshold))


# --------------------------------------------------------------------------
# identification comparison


@dataclass
class MethodResult:
    method: str
    E_f: float
    E_g: float
    reason: str = ""


def comparison_table(true_sys: ControlAffineSystem, data: identify.Dataset, dictionary,
                     cfg: identify.YosidaConfig, dict_x, test_domain: identify.Box, n_test: int,
                     seed: int, ridge: float = 0.0, methods=("resolvent", "logarithm", "lifted_linear"),
                     lam_max_steps: Optional[int] = None) -> list[MethodResult]:
    """``(E_f, E_g)`` for each identifier on one shared dataset and test set.

    A failing method is reported as NaN with its reason instead of aborting.
    """
    rows = []
    for method in methods:
        try:
            if method == "resolvent":
                model = identify.identify_resolvent(data, dictionary, cfg, ridge)
            elif method == "logarithm":
                model = identify.identify_logarithm(data, dictionary, max_steps=lam_max_steps)
            elif method == "lifted_linear":
                model = identify.identify_lifted_linear(data, dict_x, cfg, ridge)
            else:
                raise ValueError(f"unknown method {method!r}")
        except Exception as exc:  # a failed baseline must not abort the table
            log.warning("%s failed: %s", method, exc)
            rows.append(MethodResult(method, float("nan"), float("nan"), str(exc)))
            continue
        if not getattr(model, "valid", True):
            rows.append(MethodResult(method, float("nan"), float("nan"), model.reason))
            continue
        ef, eg = identify.evaluate_model_errors(true_sys, model, n_test, test_domain, seed)
        reason = "" if np.isfinite(ef) and np.isfinite(eg) else "non-finite model output"
        rows.append(MethodResult(method, ef, eg, reason))
    return rows


# --------------------------------------------------------------------------
# persistence


def _atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_ef_eg(path, rows: list[MethodResult]) -> None:
    _atomic_write(path, _csv_text(["method", "E_f", "E_g", "reason"],
                                  [(r.method, r.E_f, r.E_g, r.reason) for r in rows]))


def read_ef_eg(path) -> list[MethodResult]:
    with open(path, newline="") as fh:
        return [MethodResult(r["method"], float(r["E_f"]), float(r["E_g"]), r.get("reason", ""))
                for r in csv.DictReader(fh)]


@dataclass
class EvalReport:
    comparison: CostComparison
    success_fraction: float
    threshold: float
    t_check: float
    ef_eg_table: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def max_cost_error(self) -> float:
        return float(np.nanmax(self.comparison.abs_error))

    def summary(self) -> dict:
        c = self.comparison
        return {
            "n_traj": int(len(c.kept)),
            "n_dropped": c.n_dropped,
            "max_cost_error": self.max_cost_error,
            "final_cost_error": float(c.abs_error[-1]),
            "mean_C_final": float(c.mean_C[-1]),
            "mean_C_hat_final": float(c.mean_C_hat[-1]),
            "success_fraction": self.success_fraction,
            "threshold": self.threshold,
            "t_check": self.t_check,
            "ef_eg": [{"method": r.method, "E_f": r.E_f, "E_g": r.E_g} for r in self.ef_eg_table],
        }

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        c = self.comparison
        _atomic_write(os.path.join(out_dir, "cost_error.csv"), _csv_text(
            ["t", "mean_C_hat", "mean_C", "abs_error"],
            zip(c.times, c.mean_C_hat, c.mean_C, c.abs_error)))
        n = c.rollout_hat.states.shape[2]
        rows = []
        for i in range(c.rollout_hat.states.shape[0]):
            for t, x in zip(c.times, c.rollout_hat.states[i]):
                rows.append([i, float(t)] + [float(v) for v in x])
        _atomic_write(os.path.join(out_dir, "trajectories.csv"),
                      _csv_text(["traj_id", "t"] + [f"x{j + 1}" for j in range(n)], rows))
        if self.ef_eg_table:
            write_ef_eg(os.path.join(out_dir, "ef_eg.csv"), self.ef_eg_table)
        _atomic_write(os.path.join(out_dir, "summary.json"),
                      json.dumps(self.summary(), indent=2, sort_keys=True))


def evaluate_controllers(true_sys, pol_identified, pol_true, cost, domain, n_traj=50, T_eval=10.0,
                         dt=0.01, seed=0, threshold=1e-2, t_check=None, ef_eg_table=None) -> EvalReport:
    comp = cost_comparison(true_sys, pol_identified, pol_true, cost, domain, n_traj, T_eval, dt, seed)
    t_check = T_eval if t_check is None else t_check
    frac = stabilization_check(comp.rollout_hat.states, threshold, t_check, comp.times)
    return EvalReport(comp, frac, threshold, t_check, list(ef_eg_table or []))
