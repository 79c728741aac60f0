"""Run configuration: schema, validation and (de)serialization."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from typing import Optional

import numpy as np

from .dynamics import BENCHMARKS, benchmark

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import tomli_w


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


_MISSING = object()


def _box(section: str, raw: dict, dim: int, required: bool = True):
    """``(lo, hi)`` from ``half_width`` or explicit ``lo``/``hi`` lists."""
    hw = raw.pop("half_width", None)
    lo = raw.pop("lo", None)
    hi = raw.pop("hi", None)
    if hw is not None and (lo is not None or hi is not None):
        raise ConfigError(f"{section}: give either half_width or lo/hi, not both")
    if hw is not None:
        hw = _number(f"{section}.half_width", hw)
        if hw <= 0:
            raise ConfigError(f"{section}.half_width: must be positive")
        return [-hw] * dim, [hw] * dim
    if lo is None and hi is None:
        if required:
            raise ConfigError(f"{section}: domain missing (half_width or lo/hi)")
        return None
    if lo is None or hi is None:
        raise ConfigError(f"{section}: both lo and hi are required")
    lo = [_number(f"{section}.lo", v) for v in _list(f"{section}.lo", lo)]
    hi = [_number(f"{section}.hi", v) for v in _list(f"{section}.hi", hi)]
    if len(lo) != dim or len(hi) != dim:
        raise ConfigError(f"{section}: box must have dimension {dim}, got {len(lo)}/{len(hi)}")
    if any(a >= b for a, b in zip(lo, hi)):
        raise ConfigError(f"{section}: ill-formed box, need lo < hi componentwise")
    return lo, hi


def _list(name, v):
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"{name}: expected a list")
    return list(v)


def _number(name, v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {v!r}")
    v = float(v)
    if not np.isfinite(v):
        raise ConfigError(f"{name}: must be finite")
    return v


def _int(name, v, minimum: Optional[int] = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name}: expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{name}: must be >= {minimum}")
    return v


def _take(section: str, raw: dict, key: str, default=_MISSING):
    if key in raw:
        return raw.pop(key)
    if default is _MISSING:
        raise ConfigError(f"{section}.{key}: required field missing")
    return default


def _no_extra(section: str, raw: dict) -> None:
    if raw:
        raise ConfigError(f"{section}: unknown field(s) {sorted(raw)}")


def _matrix(name: str, v, dim: int) -> list:
    """Diagonal list or full matrix; returned as a full nested list."""
    v = _list(name, v)
    if v and all(not isinstance(r, list) for r in v):
        diag = [_number(name, x) for x in v]
        if len(diag) != dim:
            raise ConfigError(f"{name}: expected {dim} diagonal entries, got {len(diag)}")
        mat = np.diag(diag)
    else:
        mat = np.array([[_number(name, x) for x in _list(name, r)] for r in v])
        if mat.shape != (dim, dim):
            raise ConfigError(f"{name}: expected a {dim}x{dim} matrix, got shape {mat.shape}")
    if not np.allclose(mat, mat.T) or np.min(np.linalg.eigvalsh(mat)) <= 0:
        raise ConfigError(f"{name}: must be symmetric positive definite")
    return mat.tolist()


@dataclass
class SystemSection:
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class IdentificationSection:
    lo: list
    hi: list
    M: int
    seed: int
    T: float = 1.0
    rate: float = 100.0
    rule: str = "max_per_variable"
    degree: int = 3
    lam: float = 100.0
    t_max: float = 1.0
    quadrature: str = "cubic"
    invert: bool = True
    ridge: float = 0.0
    n_test: int = 2000
    logarithm_max_steps: int = 0  # 0 = every step of every trajectory


@dataclass
class PiSection:
    lo: list
    hi: list
    seed: int
    s: int = 200
    samples: int = 3000
    tol: float = 1e-6
    max_iter: int = 50
    Qx: list = field(default_factory=list)
    R: list = field(default_factory=list)
    activation: str = "tanh"
    input_scale: float = 1.0
    ridge_factor: float = 1e-8
    solver: str = "normal"


@dataclass
class EvalSection:
    lo: list
    hi: list
    seed: int
    n_traj: int = 50
    T_eval: float = 10.0
    dt: float = 0.01
    threshold: float = 1e-2
    t_check: float = 10.0


@dataclass
class RunConfig:
    system: SystemSection
    identification: IdentificationSection
    pi: PiSection
    eval: EvalSection
    output_dir: str

    @property
    def n(self) -> int:
        return len(self.pi.lo)

    def build_system(self):
        return benchmark(self.system.name, self.system.params)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def with_overrides(self, seed: Optional[int] = None, n_traj: Optional[int] = None,
                       output_dir: Optional[str] = None) -> "RunConfig":
        d = self.to_dict()
        if seed is not None:
            for sec in ("identification", "pi", "eval"):
                d[sec]["seed"] = seed
        if n_traj is not None:
            d["eval"]["n_traj"] = n_traj
        if output_dir is not None:
            d["output_dir"] = output_dir
        return parse_config(d)


def parse_config(raw: dict) -> RunConfig:
    """Validate a raw mapping and fill defaults. Raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a table at top level")
    raw = json.loads(json.dumps(raw))  # deep copy, plain types
    sys_raw = _take("config", raw, "system")
    if not isinstance(sys_raw, dict):
        raise ConfigError("system: expected a table")
    name = _take("system", sys_raw, "name")
    if name not in BENCHMARKS:
        raise ConfigError(f"system.name: unknown system {name!r}; choose from {sorted(BENCHMARKS)}")
    params = _take("system", sys_raw, "params", {})
    if not isinstance(params, dict):
        raise ConfigError("system.params: expected a table")
    _no_extra("system", sys_raw)
    try:
        built = benchmark(name, params)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"system.params: {exc}") from exc
    n, m = built.n, built.m
    system = SystemSection(name, {k: float(v) for k, v in params.items()})

    sec = _take("config", raw, "identification")
    if not isinstance(sec, dict):
        raise ConfigError("identification: expected a table")
    lo, hi = _box("identification", sec, n + m)
    ident = IdentificationSection(
        lo=lo, hi=hi,
        M=_int("identification.M", _take("identification", sec, "M"), 1),
        seed=_int("identification.seed", _take("identification", sec, "seed"), 0),
    )
    for f in fields(IdentificationSection):
        if f.name in sec:
            setattr(ident, f.name, sec.pop(f.name))
    _no_extra("identification", sec)
    ident.T = _number("identification.T", ident.T)
    ident.rate = _number("identification.rate", ident.rate)
    ident.lam = _number("identification.lam", ident.lam)
    ident.t_max = _number("identification.t_max", ident.t_max)
    ident.ridge = _number("identification.ridge", ident.ridge)
    ident.degree = _int("identification.degree", ident.degree, 1)
    ident.n_test = _int("identification.n_test", ident.n_test, 1)
    ident.logarithm_max_steps = _int("identification.logarithm_max_steps", ident.logarithm_max_steps, 0)
    for key in ("T", "rate", "lam", "t_max"):
        if getattr(ident, key) <= 0:
            raise ConfigError(f"identification.{key}: must be positive")
    if ident.ridge < 0:
        raise ConfigError("identification.ridge: must be non-negative")
    if ident.t_max > ident.T + 1e-12:
        raise ConfigError("identification.t_max: must not exceed the trajectory length T")
    steps = ident.T * ident.rate
    if abs(steps - round(steps)) > 1e-9:
        raise ConfigError("identification.rate: T * rate must be an integer number of steps")
    if ident.rule not in ("max_per_variable", "total_degree"):
        raise ConfigError(f"identification.rule: unknown rule {ident.rule!r}")
    if ident.quadrature not in ("cubic", "linear", "trapezoid"):
        raise ConfigError(f"identification.quadrature: unknown quadrature {ident.quadrature!r}")
    if not isinstance(ident.invert, bool):
        raise ConfigError("identification.invert: expected a boolean")

    sec = _take("config", raw, "pi")
    if not isinstance(sec, dict):
        raise ConfigError("pi: expected a table")
    lo, hi = _box("pi", sec, n)
    pi = PiSection(lo=lo, hi=hi, seed=_int("pi.seed", _take("pi", sec, "seed"), 0))
    for f in fields(PiSection):
        if f.name in sec:
            setattr(pi, f.name, sec.pop(f.name))
    _no_extra("pi", sec)
    pi.s = _int("pi.s", pi.s, 1)
    pi.samples = _int("pi.samples", pi.samples, 1)
    pi.max_iter = _int("pi.max_iter", pi.max_iter, 1)
    pi.tol = _number("pi.tol", pi.tol)
    pi.input_scale = _number("pi.input_scale", pi.input_scale)
    pi.ridge_factor = _number("pi.ridge_factor", pi.ridge_factor)
    if pi.tol < 0 or pi.input_scale <= 0 or pi.ridge_factor < 0:
        raise ConfigError("pi: tol and ridge_factor must be >= 0, input_scale > 0")
    pi.Qx = _matrix("pi.Qx", pi.Qx or [1.0] * n, n)
    pi.R = _matrix("pi.R", pi.R or [1.0] * m, m)
    if pi.activation not in ("tanh", "softplus"):
        raise ConfigError(f"pi.activation: unknown activation {pi.activation!r}")
    if pi.solver not in ("normal", "qr"):
        raise ConfigError(f"pi.solver: unknown solver {pi.solver!r}")

    sec = _take("config", raw, "eval")
    if not isinstance(sec, dict):
        raise ConfigError("eval: expected a table")
    box = _box("eval", sec, n, required=False)
    if box is None:
        box = (ident.lo[:n], ident.hi[:n])
    ev = EvalSection(lo=box[0], hi=box[1], seed=_int("eval.seed", _take("eval", sec, "seed"), 0))
    t_check_given = "t_check" in sec
    for f in fields(EvalSection):
        if f.name in sec:
            setattr(ev, f.name, sec.pop(f.name))
    _no_extra("eval", sec)
    ev.n_traj = _int("eval.n_traj", ev.n_traj, 1)
    for key in ("T_eval", "dt", "threshold", "t_check"):
        setattr(ev, key, _number(f"eval.{key}", getattr(ev, key)))
        if getattr(ev, key) <= 0:
            raise ConfigError(f"eval.{key}: must be positive")
    if not t_check_given:
        ev.t_check = ev.T_eval
    if ev.t_check > ev.T_eval:
        raise ConfigError("eval.t_check: must not exceed T_eval")

    out = raw.pop("output_dir", os.path.join("runs", name))
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir: expected a non-empty string")
    _no_extra("config", raw)
    return RunConfig(system, ident, pi, ev, out)


def shipped_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("koopman_pi").joinpath("configs").iterdir()
                  if p.name.endswith(".toml"))


def load_config(path: str) -> RunConfig:
    """Read TOML (or JSON, by extension) and validate.

    A bare shipped name such as ``pendulum`` resolves to the bundled config.
    """
    if not os.path.exists(path):
        stem = os.path.basename(path)
        stem = stem[:-5] if stem.endswith(".toml") else stem
        if stem in shipped_configs() and os.sep not in path:
            text = resources.files("koopman_pi").joinpath("configs", f"{stem}.toml").read_text()
            return parse_config(_parse_text(text, "toml", path))
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(_parse_text(text, "json" if path.endswith(".json") else "toml", path))


def _parse_text(text: str, kind: str, path: str) -> dict:
    try:
        return json.loads(text) if kind == "json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse {kind.upper()}: {exc}") from exc
