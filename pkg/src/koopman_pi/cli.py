"""Command-line pipeline: identify, control, evaluate.

Every command writes its artifacts and the resolved configuration
(``run.toml``) into one output directory; later stages read earlier
artifacts from there.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext

import numpy as np

from . import evaluation, identify
from .config import ConfigError, RunConfig, load_config
from .dynamics import ValueGradient
from .evaluation import _atomic_write
from .observables import MaxPerVariable, TotalDegree, enumerate_dictionary
from .pi import CostSpec, PiConfig, ValueNetwork, policy_iteration

log = logging.getLogger("koopman_pi")

MODEL_FILE = "model.json"
DICTIONARY_FILE = "dictionary.json"
EF_EG_FILE = "ef_eg.csv"
SUMMARY_FILE = "summary.json"
TIMINGS_FILE = "timings.json"
RUN_FILE = "run.toml"


def value_file(role: str) -> str:
    return f"value_{role}.json"


def history_file(role: str) -> str:
    return f"pi_history_{role}.csv"


class RuntimeFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers


def _rule(cfg: RunConfig):
    ident = cfg.identification
    return MaxPerVariable(ident.degree) if ident.rule == "max_per_variable" else TotalDegree(ident.degree)


def _yosida(cfg: RunConfig) -> identify.YosidaConfig:
    ident = cfg.identification
    return identify.YosidaConfig(ident.lam, ident.t_max, ident.quadrature, ident.invert)


def _id_box(cfg: RunConfig) -> identify.Box:
    return identify.Box(cfg.identification.lo, cfg.identification.hi)


def _cost(cfg: RunConfig) -> CostSpec:
    return CostSpec(np.array(cfg.pi.Qx), np.array(cfg.pi.R))


def _prepare_out(cfg: RunConfig) -> str:
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, RUN_FILE)
    text = cfg.to_toml()
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            old = fh.read()
        if old != text:
            log.info("run.toml in %s replaced by the current configuration", out)
    _atomic_write(path, text)
    return out


def _record_timing(out: str, stage: str, seconds: float) -> None:
    path = os.path.join(out, TIMINGS_FILE)
    data = {}
    if os.path.exists(path):
        with open(path) as fh:
            data = json.load(fh)
    data[stage] = round(seconds, 3)
    _atomic_write(path, json.dumps(data, indent=2, sort_keys=True))


def _stage_line(stage: str, seconds: float, **fields) -> None:
    parts = [f"stage={stage}"] + [f"{k}={_fmt(v)}" for k, v in fields.items()] + [f"seconds={seconds:.2f}"]
    log.info(" ".join(parts))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3e}"
    return str(v)


def _read_model(out: str) -> identify.GeneratorModel:
    path = os.path.join(out, MODEL_FILE)
    if not os.path.exists(path):
        raise RuntimeFailure(f"missing model file {path}; run identify first")
    with open(path) as fh:
        return identify.GeneratorModel.from_json(fh.read())


def _read_value(out: str, role: str) -> tuple[ValueNetwork, dict]:
    path = os.path.join(out, value_file(role))
    if not os.path.exists(path):
        raise RuntimeFailure(f"missing network file {path}; run control first")
    with open(path) as fh:
        data = json.load(fh)
    return ValueNetwork.from_dict(data), data


# --------------------------------------------------------------------------
# commands


def cmd_identify(cfg: RunConfig, baselines: bool = False) -> identify.GeneratorModel:
    t0 = time.perf_counter()
    out = _prepare_out(cfg)
    true_sys = cfg.build_system()
    ident = cfg.identification
    box = _id_box(cfg)
    data = identify.generate_dataset(true_sys, identify.SamplePlan(box, ident.M, ident.T, ident.rate, ident.seed))
    d = enumerate_dictionary(true_sys.n, true_sys.m, _rule(cfg))
    ycfg = _yosida(cfg)
    model = identify.identify_resolvent(data, d, ycfg, ident.ridge)
    model.config.update({"system": cfg.system.name, "seed": ident.seed})
    test_seed = ident.seed + 1
    ef, eg = identify.evaluate_model_errors(true_sys, model, ident.n_test, box, test_seed)
    rows = [evaluation.MethodResult("resolvent", ef, eg)]
    if baselines:
        dict_x = identify.lifted_dictionary(true_sys.n, _rule(cfg))
        rows += evaluation.comparison_table(
            true_sys, data, d, ycfg, dict_x, box, ident.n_test, test_seed, ident.ridge,
            methods=("logarithm", "lifted_linear"),
            lam_max_steps=ident.logarithm_max_steps or None)
    _atomic_write(os.path.join(out, MODEL_FILE), model.to_json())
    _atomic_write(os.path.join(out, DICTIONARY_FILE), d.to_json())
    evaluation.write_ef_eg(os.path.join(out, EF_EG_FILE), rows)
    dt = time.perf_counter() - t0
    _record_timing(out, "identify", dt)
    _stage_line("identify", dt, system=cfg.system.name, N=d.N, M=data.M, E_f=ef, E_g=eg,
                **{f"{r.method}_E_g": r.E_g for r in rows[1:]})
    return model


def cmd_control(cfg: RunConfig, true_system: bool = False):
    t0 = time.perf_counter()
    out = _prepare_out(cfg)
    role = "true" if true_system else "identified"
    if true_system:
        model = cfg.build_system()
    else:
        model = _read_model(out)
        sys_ = cfg.build_system()
        if (model.n, model.m) != (sys_.n, sys_.m):
            raise ConfigError(f"model dimensions (n={model.n}, m={model.m}) do not match "
                              f"system {cfg.system.name} (n={sys_.n}, m={sys_.m})")
        if not model.valid:
            raise RuntimeFailure(f"identified model is invalid: {model.reason}")
    p = cfg.pi
    pcfg = PiConfig((p.lo, p.hi), s=p.s, samples=p.samples, max_iter=p.max_iter, tol=p.tol, seed=p.seed,
                    activation=p.activation, input_scale=p.input_scale, ridge_factor=p.ridge_factor,
                    solver=p.solver)
    state = policy_iteration(model, _cost(cfg), pcfg)
    if state.iter == 0:
        raise RuntimeFailure(f"policy iteration failed before the first iteration: {state.error}")
    doc = state.vnet.to_dict()
    doc.update({"role": role, "converged": state.converged, "iterations": state.iter,
                "error": state.error})
    _atomic_write(os.path.join(out, value_file(role)), json.dumps(doc, indent=1, sort_keys=True))
    tmp = os.path.join(out, history_file(role) + ".tmp")
    state.history_csv(tmp)
    os.replace(tmp, os.path.join(out, history_file(role)))
    dt = time.perf_counter() - t0
    _record_timing(out, f"control_{role}", dt)
    if not state.converged:
        log.warning("policy iteration (%s) did not converge in %d iterations; result kept", role, state.iter)
    _stage_line(f"control_{role}", dt, iterations=state.iter, converged=state.converged,
                ghjb_residual=state.residual_history[-1], beta_delta=state.beta_delta_history[-1])
    return state


def cmd_evaluate(cfg: RunConfig) -> evaluation.EvalReport:
    t0 = time.perf_counter()
    out = _prepare_out(cfg)
    true_sys = cfg.build_system()
    model = _read_model(out)
    v_id, _ = _read_value(out, "identified")
    v_true, _ = _read_value(out, "true")
    for v in (v_id, v_true):
        if v.n != true_sys.n:
            raise ConfigError(f"value network has input dimension {v.n}, system has n={true_sys.n}")
    cost = _cost(cfg)
    pol_id = ValueGradient(v_id, model.g, cost.R)
    pol_true = ValueGradient(v_true, true_sys.g, cost.R)
    ev = cfg.eval
    table = []
    ef_path = os.path.join(out, EF_EG_FILE)
    if os.path.exists(ef_path):
        table = evaluation.read_ef_eg(ef_path)
    report = evaluation.evaluate_controllers(
        true_sys, pol_id, pol_true, cost, identify.Box(ev.lo, ev.hi), ev.n_traj, ev.T_eval, ev.dt,
        ev.seed, ev.threshold, ev.t_check, table)
    report.write(out)
    dt = time.perf_counter() - t0
    _record_timing(out, "evaluate", dt)
    _stage_line("evaluate", dt, n_traj=ev.n_traj, dropped=report.comparison.n_dropped,
                max_cost_error=report.max_cost_error, success_fraction=report.success_fraction)
    return report


def _stage_done(out: str, files) -> bool:
    return all(os.path.exists(os.path.join(out, f)) for f in files)


def cmd_pipeline(cfg: RunConfig, resume: bool = False, baselines: bool = False) -> evaluation.EvalReport:
    out = cfg.output_dir
    if resume and os.path.exists(os.path.join(out, RUN_FILE)):
        with open(os.path.join(out, RUN_FILE), encoding="utf-8") as fh:
            if fh.read() != cfg.to_toml():
                raise ConfigError(f"--resume: configuration differs from {os.path.join(out, RUN_FILE)}")
    stages = [
        ("identify", [MODEL_FILE, EF_EG_FILE], lambda: cmd_identify(cfg, baselines)),
        ("control_identified", [value_file("identified")], lambda: cmd_control(cfg, False)),
        ("control_true", [value_file("true")], lambda: cmd_control(cfg, True)),
    ]
    for name, files, run in stages:
        if resume and _stage_done(out, files):
            log.info("stage=%s skipped=resume", name)
            continue
        run()
    return cmd_evaluate(cfg)


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH",
                        help="TOML or JSON run config, or the name of a shipped config")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, metavar="N", help="override every seed in the config")
    common.add_argument("--quiet", action="store_true", help="log errors only")
    parser = argparse.ArgumentParser(prog="koopman-pi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("identify", parents=[common], help="identify the generator from sampled data")
    p.add_argument("--baselines", action="store_true", help="also run the logarithm and lifted-linear baselines")
    p = sub.add_parser("control", parents=[common], help="policy iteration on the identified model")
    p.add_argument("--true-system", action="store_true", help="run on the analytic benchmark instead")
    p = sub.add_parser("evaluate", parents=[common], help="closed-loop comparison on the true system")
    p.add_argument("--n-traj", type=int, metavar="N", help="override the number of evaluation trajectories")
    p = sub.add_parser("pipeline", parents=[common], help="identify, control (both), evaluate")
    p.add_argument("--resume", action="store_true", help="skip stages whose artifacts exist")
    p.add_argument("--baselines", action="store_true")
    p.add_argument("--n-traj", type=int, metavar="N")
    return parser


def _thread_limit():
    raw = os.environ.get("KOOPMAN_PI_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"KOOPMAN_PI_THREADS: expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("KOOPMAN_PI_THREADS: must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_overrides(seed=args.seed, n_traj=getattr(args, "n_traj", None), output_dir=args.out)
        with _thread_limit():
            if args.command == "identify":
                cmd_identify(cfg, args.baselines)
            elif args.command == "control":
                cmd_control(cfg, args.true_system)
            elif args.command == "evaluate":
                cmd_evaluate(cfg)
            else:
                cmd_pipeline(cfg, args.resume, args.baselines)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
