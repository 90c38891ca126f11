"""Command-line interface: ``kbqml <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, load_config, parse_float, parse_floats
from .csvio import fmt, read_series, write_csv, write_series
from .discretize import assemble_generator, build_grid, fichera_check
from .errors import ConfigError, KBQMLError, NumericalError
from .experiments import (
    FIT_HEADER,
    boundary_warnings,
    run_bench,
    run_convergence,
    run_estimation,
    run_estimation_random,
    run_moment_error,
)
from .model import get_model
from .moments import BackwardProvider
from .qml import NelderMeadOptions, default_base_step, default_grid, fit_qml
from .simulate import SamplingSchedule, SimConfig, simulate_series

log = logging.getLogger("kbqml")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="flat 'section.key = value' config file")
    p.add_argument("--seed", type=int, default=d, help="base seed (overrides experiment.seed)")
    p.add_argument("--out-dir", default=d, help="output directory (overrides output.dir)")
    p.add_argument("--diagnostics", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="print boundary and propagator diagnostics")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="kbqml", description="Backward-equation moments and quasi-likelihood estimation.")
    top.add_argument("--version", action="version", version=f"kbqml {__version__}")
    _global_flags(top, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = top.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a CIR/iCIR series to t,x CSV")
    s.add_argument("--model")
    s.add_argument("--theta", help="a,b,sigma")
    s.add_argument("--x0", type=float)
    s.add_argument("--k", type=int, help="observations including burn-in")
    s.add_argument("--burnin", type=int)
    s.add_argument("--dt", help="fixed gap (fractions like 1/12 allowed)")
    s.add_argument("--dt-range", help="lo,hi for uniformly random gaps")
    s.add_argument("--substeps", type=int)
    s.add_argument("--out", help="output file (default <out-dir>/simulated.csv)")

    sub.add_parser("moments-error", parents=[common], help="absolute moment errors against the CIR closed form")
    sub.add_parser("convergence", parents=[common], help="spatial convergence of backward moments")

    e = sub.add_parser("estimate", parents=[common], help="quasi-likelihood fits (replications, or one --data file)")
    e.add_argument("--data", help="t,x CSV; fit once instead of running replications")
    e.add_argument("--model")
    e.add_argument("--method", help="backward, euler, ito1, ito2")
    e.add_argument("--init", help="a,b,sigma starting point")
    e.add_argument("--grid", help="xmin,xmax,n for the backward method")
    e.add_argument("--out", help="output file for a single fit (default <out-dir>/fit.csv)")

    sub.add_parser("estimate-random", parents=[common], help="replicated fits with random sampling gaps")
    sub.add_parser("bench", parents=[common], help="likelihood evaluation cost against K")
    return top


def _prepare(args) -> tuple[ExperimentConfig, Path, int]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.set("experiment.seed", args.seed)
    out = Path(args.out_dir if args.out_dir is not None else cfg.get("output.dir"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return cfg, out, cfg.get("experiment.seed")


def _grid_arg(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError("--grid expects xmin,xmax,n")
    n = parse_float(parts[2])
    if n != int(n):
        raise ConfigError("--grid: n must be an integer")
    return parse_float(parts[0]), parse_float(parts[1]), int(n)


def _cmd_simulate(args, cfg, out, seed):
    model = get_model(args.model or cfg.get("model.name", "icir"))
    theta = parse_floats(args.theta) if args.theta else tuple(cfg.get("model.theta"))
    k = args.k if args.k is not None else cfg.get("schedule.k")
    burnin = args.burnin if args.burnin is not None else cfg.get("schedule.burnin")
    if args.dt_range:
        lo, hi = parse_floats(args.dt_range)
        sched = SamplingSchedule("uniform", k, burnin, dt_lo=lo, dt_hi=hi)
    elif args.dt:
        sched = SamplingSchedule("fixed", k, burnin, dt=parse_float(args.dt))
    elif cfg.get("schedule.kind", "fixed") == "uniform":
        sched = SamplingSchedule("uniform", k, burnin, dt_lo=cfg.get("schedule.dt_lo"), dt_hi=cfg.get("schedule.dt_hi"))
    else:
        sched = SamplingSchedule("fixed", k, burnin, dt=cfg.get("schedule.dt"))
    x0 = args.x0 if args.x0 is not None else cfg.get("sim.x0")
    substeps = args.substeps if args.substeps is not None else cfg.get("sim.substeps")
    rep = simulate_series(SimConfig(model, theta, x0, substeps, seed=seed), sched)
    path = Path(args.out) if args.out else out / "simulated.csv"
    write_series(path, rep.series, {"command": "simulate", "config_sha256": cfg.digest(), "seed": seed,
                                    "model": model.name})
    if args.diagnostics:
        print(f"floor hits: {rep.floor_hits}")
    print(path)


def _diagnose(model, theta, grid, base_step, exp_tol):
    print(f"diagnostics for {model.name} at theta=({', '.join(f'{v:g}' for v in theta)}), "
          f"grid [{grid.x_min:g}, {grid.x_max:g}] n={grid.n}")
    for side, r in fichera_check(model, theta, grid).items():
        print(f"fichera {side}: x={r.x:g} value={r.value:g} needs_bc={r.needs_bc} degenerate={r.degenerate}")
    prov = BackwardProvider(model, theta, grid, base_step)
    dev = prov.plan.row_sum_deviation()
    flag = "" if dev <= exp_tol else f" (exceeds prop.exp_tol={exp_tol:g})"
    print(f"E_base row-sum deviation: {dev:.3e}{flag}")
    print(f"||L_h||_inf: {assemble_generator(model, theta, grid).inf_norm:.3e}")


def _cmd_estimate_single(args, cfg, out, seed):
    series = read_series(args.data)
    model = get_model(args.model or cfg.get("model.name", "icir"))
    method = (args.method or "backward").lower()
    init = parse_floats(args.init) if args.init else tuple(cfg.get("estimate.init"))
    grid = base = None
    if method == "backward":
        if args.grid:
            grid = build_grid(*_grid_arg(args.grid))
        elif cfg.get("grid.xmin") is not None and cfg.get("grid.xmax") is not None:
            grid = build_grid(cfg.get("grid.xmin"), cfg.get("grid.xmax"), cfg.get("grid.n"))
        else:
            grid = default_grid(series, model, cfg.get("grid.n"), cfg.get("grid.auto_margin"))
        base = cfg.get("prop.base_step") or default_base_step(series)
        for msg in boundary_warnings(model, init, grid):
            log.warning(msg)
        if args.diagnostics:
            _diagnose(model, init, grid, base, cfg.get("prop.exp_tol"))
    opts = NelderMeadOptions(max_iter=cfg.get("optim.max_iter"), xtol=cfg.get("optim.xtol"), ftol=cfg.get("optim.ftol"))
    t0 = time.perf_counter()
    fit = fit_qml(series, model, method, init, grid=grid, base_step=base, options=opts)
    ms = (time.perf_counter() - t0) * 1e3
    a, b, s = (float(v) for v in fit.theta)
    row = (0, method, a, b, s, fit.loglik, fit.converged, fit.termination_reason.value,
           fit.iterations, fit.function_evals, ms)
    path = Path(args.out) if args.out else out / "fit.csv"
    write_csv(path, FIT_HEADER, [row], {"command": "estimate", "config_sha256": cfg.digest(), "data": args.data})
    print(",".join(FIT_HEADER))
    print(",".join(fmt(v) for v in row))


def _report(name, result):
    if "summary" in result:
        for r in result["summary"]:
            print(f"{r[0]:>12s} {r[1]:>5s} median={r[3]:.4g} iqr={r[6]:.3g} bias={r[7]:+.3g} "
                  f"converged={r[8]} failed={r[9]}")
    if "slopes" in result:
        for r in result["slopes"]:
            print(f"{r[0]:>5s} {r[1]:>4s} order={r[2]:.3g} mse_slope={r[3]:.3g} monotone={r[4]}")
    if "fits" in result:
        for r in result["fits"]:
            print(f"{r[0]:>9s} intercept={r[1]:.3g}ms slope={r[2]:.3g}ms/obs r2={r[3]:.4f} ratio={r[5]:.3g}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, out, seed = _prepare(args)
        cmd = args.command
        if cmd == "simulate":
            _cmd_simulate(args, cfg, out, seed)
        elif cmd == "estimate" and args.data:
            _cmd_estimate_single(args, cfg, out, seed)
        else:
            if cmd == "estimate":
                for flag in ("model", "method", "init", "grid"):
                    if getattr(args, flag) is not None:
                        raise ConfigError(f"--{flag} applies only together with --data")
            run = {
                "moments-error": run_moment_error,
                "convergence": run_convergence,
                "estimate": run_estimation,
                "estimate-random": run_estimation_random,
                "bench": run_bench,
            }[cmd]
            if cmd in ("moments-error", "convergence"):
                theta = tuple(cfg.get("model.theta"))
                grid = build_grid(cfg.get("grid.xmin", 0.05), cfg.get("grid.xmax", 0.15),
                                  cfg.get("grid.n", 511) if cmd == "moments-error" else max(cfg.get("convergence.n_list")))
                names = ["cir"] if cmd == "moments-error" else cfg.get("convergence.models")
                for nm in names:
                    for msg in boundary_warnings(get_model(nm), theta, grid):
                        log.warning("%s: %s", nm, msg)
                    if args.diagnostics:
                        _diagnose(get_model(nm), theta, grid, cfg.get("moments.tau"), cfg.get("prop.exp_tol"))
            result = run(cfg, out, seed)
            _report(cmd, result if isinstance(result, dict) else {})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except KeyError as exc:
        print(f"config error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:
        if isinstance(exc, NumericalError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return 3
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except KBQMLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
