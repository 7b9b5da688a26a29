"""Command-line entry point.

Exit codes: 0 success, 2 run stopped by blow-up, 3 invalid input (config or
data), 4 numerical failure.
"""

from __future__ import annotations

import argparse
from contextlib import contextmanager
import logging
from pathlib import Path
import shutil
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, digest, parse_config, parse_config_text, serialize
from .estimation import (
    THETA_NAMES,
    EstimationProblem,
    ForwardFailure,
    estimate,
    forward_densities,
    sensitivity,
    sensitivity_summary,
)
from .grid import Grid2D, GridError, read_snapshot
from .io import (
    DataError,
    read_json,
    read_trajectories,
    read_tumors,
    write_json,
    write_series,
    write_trajectories,
    write_tumors,
)
from .micro import AgentEscape, run_micro
from .models import NumericalFailure, run_macro, run_macro_twopop
from .parabolic import LinearSolveError
from .plotting import STYLES, GridMismatch, agents_overlay, heatmap, quiver_overlay

logger = logging.getLogger("chemotaxis_euler")

EXIT_OK = 0
EXIT_BLOWUP = 2
EXIT_INVALID = 3
EXIT_NUMERICAL = 4


# --- helpers --------------------------------------------------------------------


def _load_config(args, kind_default: str) -> RunConfig:
    if args.config:
        cfg = parse_config(args.config)
    else:
        cfg = parse_config_text(f"kind: {kind_default}\n")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.snapshots:
        try:
            overrides["snapshot_times"] = [float(v) for v in args.snapshots.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"--snapshots expects comma-separated times: {exc}") from exc
    if args.limiter:
        overrides["model.limiter"] = args.limiter
    if args.epsilon is not None:
        overrides["pressure.epsilon"] = args.epsilon
    if args.interactions is not None:
        names = [v.strip().upper() for v in args.interactions.split(",") if v.strip()]
        if names == ["NONE"]:
            names = []
        overrides["model.interactions"] = names
    return cfg.with_overrides(**overrides) if overrides else cfg


@contextmanager
def _staging(out: Path):
    """Write into a temporary directory and move the files into ``out`` only on completion."""
    tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=out.parent if out.parent.exists() else None))
    try:
        yield tmp
        out.mkdir(parents=True, exist_ok=True)
        for item in sorted(tmp.iterdir()):
            target = out / item.name
            if target.exists():
                target.unlink()
            shutil.move(str(item), str(target))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _manifest(command: str, cfg: RunConfig, outdir: Path, artifacts: list, **extra) -> Path:
    """Run manifest (no wall-clock data, so reruns reproduce it byte for byte)."""
    payload = {
        "command": command,
        "kind": cfg.kind,
        "config_digest": digest(cfg),
        "seed": cfg.seed,
        "config_file": "config.yaml",
        "timing_file": "timing.json",
        "artifacts": sorted(set(artifacts) | {"config.yaml", "timing.json", "manifest.json"}),
        "version": __version__,
    }
    payload.update(extra)
    return write_json(outdir / "manifest.json", payload)


def _finish(command, cfg, outdir, artifacts, started, **extra):
    (outdir / "config.yaml").write_text(serialize(cfg))
    write_json(outdir / "timing.json", {"start": started, "end": time.time(), "elapsed_s": time.time() - started})
    _manifest(command, cfg, outdir, artifacts, **extra)


def _read_problem_data(args, grid: Grid2D):
    times, positions = read_trajectories(args.data)
    if times[0] != 0.0:
        raise DataError(f"{args.data}: trajectories must start at t=0 (initial positions)")
    densities = None
    data_times = tuple(times[1:])
    trajectories = positions[1:]
    if getattr(args, "densities", None):
        files = sorted(Path(args.densities).glob("rho_*.csv"))
        if not files:
            raise DataError(f"no rho_*.csv snapshots in {args.densities}")
        densities, dtimes = [], []
        for f in files:
            values, meta = read_snapshot(f)
            if (meta["nx"], meta["ny"]) != grid.shape:
                raise DataError(f"{f}: grid {meta['nx']}x{meta['ny']} differs from config grid {grid.shape}")
            densities.append(values)
            dtimes.append(meta["t"])
        data_times, trajectories = tuple(dtimes), None
    if not data_times:
        raise DataError(f"{args.data}: no data after t=0")
    return positions[0], data_times, trajectories, densities


def _problem(cfg: RunConfig, args) -> EstimationProblem:
    settings = cfg.estimation()
    base = cfg.macro_config()
    x0, data_times, trajectories, densities = _read_problem_data(args, base.grid)
    return EstimationProblem(
        theta0=np.array(settings.theta0), base=base, layout=cfg.layout(), initial_positions=x0,
        data_times=data_times, trajectories=trajectories, densities=densities,
        R_imm=settings.R_imm, lambda2=settings.lambda2, bound_factor=settings.bound_factor,
        fd_step=settings.fd_step, max_iter=settings.max_iter, regularization=settings.regularization,
        fixed_time_grid=settings.fixed_time_grid,
    )


# --- commands ----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _load_config(args, "macro")
    kind = args.kind or ("macro2pop" if cfg.kind == "estimate" else cfg.kind)
    out = Path(args.out)
    started = time.time()
    with _staging(out) as tmp:
        if kind == "micro":
            mcfg = cfg.micro_config()
            result = run_micro(mcfg)
            artifacts = [write_trajectories(tmp / "trajectory.csv", result.times, result.positions).name,
                         write_tumors(tmp / "tumors.csv", mcfg.layout, mcfg.R_imm).name]
            _finish("simulate", cfg, tmp, artifacts, started, model="micro",
                    snapshots=[{"time": t} for t in result.times])
            return EXIT_OK
        mac = cfg.macro_config()
        if kind == "macro2pop":
            series = run_macro_twopop(mac, cfg.layout())
        else:
            series = run_macro(mac)
        index = write_series(tmp, series, mac.grid)
        artifacts = [f for entry in index for f in entry["files"]]
        _finish("simulate", cfg, tmp, artifacts, started, model=kind, snapshots=index,
                diagnostics=series.diagnostics)
    if series.blew_up:
        logger.warning("blow-up detected at t=%.6g", series.diagnostics["blowup_time"])
        return EXIT_BLOWUP
    return EXIT_OK


def cmd_generate_synthetic(args) -> int:
    cfg = _load_config(args, "micro")
    mcfg = cfg.micro_config()
    started = time.time()
    with _staging(Path(args.out)) as tmp:
        result = run_micro(mcfg)
        artifacts = [write_trajectories(tmp / "trajectory.csv", result.times, result.positions).name,
                     write_tumors(tmp / "tumors.csv", mcfg.layout, mcfg.R_imm).name]
        _finish("generate-synthetic", cfg, tmp, artifacts, started, model="micro",
                snapshots=[{"time": t} for t in result.times])
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _load_config(args, "estimate")
    problem = _problem(cfg, args)
    started = time.time()
    with _staging(Path(args.out)) as tmp:
        result = estimate(problem, n_jobs=cfg.estimation().n_jobs)
        report = {
            "parameters": list(THETA_NAMES),
            "theta0": problem.theta0,
            "lower": problem.lower,
            "upper": problem.upper,
            "lambda2": problem.lambda2,
            "regularization": problem.regularization,
            "data_times": list(problem.data_times),
            "schedule": [list(b) for b in problem.schedule()],
            **result.as_dict(),
        }
        write_json(tmp / "report.json", report)
        artifacts = ["report.json"]
        try:
            series = forward_densities(result.theta_opt, problem)
            index = write_series(tmp, series, problem.base.grid, fields=("rho",))
            artifacts += [f for entry in index for f in entry["files"]]
        except ForwardFailure as exc:
            logger.warning("best-fit run failed: %s", exc)
            index = []
        _finish("estimate", cfg, tmp, artifacts, started, snapshots=index, E=result.E,
                converged=result.converged)
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    cfg = _load_config(args, "estimate")
    problem = _problem(cfg, args)
    if args.report:
        theta = np.array(read_json(args.report)["theta_opt"], dtype=float)
    elif args.theta:
        theta = np.array([float(v) for v in args.theta.split(",")])
    else:
        theta = problem.theta0
    if theta.shape != (6,):
        raise ConfigError(f"theta must have 6 components ({', '.join(THETA_NAMES)})")
    started = time.time()
    with _staging(Path(args.out)) as tmp:
        rows = sensitivity(theta, problem, delta_frac=cfg.estimation().delta_frac)
        write_json(tmp / "sensitivity.json", {"theta": theta, "rows": rows, "summary": sensitivity_summary(rows)})
        _finish("sensitivity", cfg, tmp, ["sensitivity.json"], started)
    return EXIT_OK


def cmd_plot(args) -> int:
    if args.style == "agents-overlay" and not args.trajectory:
        raise ConfigError("agents-overlay needs --trajectory")
    loaded = []
    for name in args.snapshots:
        path = Path(name)
        try:
            values, meta = read_snapshot(path)
        except (OSError, GridError, ValueError) as exc:
            raise DataError(f"cannot read snapshot {path}: {exc}") from exc
        loaded.append((path, values, meta))
    traj = read_trajectories(args.trajectory) if args.trajectory else None
    tumors, R_tum, R_imm = read_tumors(args.tumors) if args.tumors else (np.zeros((0, 2)), 0.05, 0.02)
    out = Path(args.out)
    with _staging(out) as tmp:
        for path, values, meta in loaded:
            grid = Grid2D(L=meta["dx"] * (meta["nx"] - 1), nx=meta["nx"], ny=meta["ny"])
            target = tmp / f"{path.stem}_{args.style}.png"
            title = f"t = {meta['t']:.4g}"
            if args.style == "heatmap":
                heatmap(values, grid, target, title)
            elif args.style == "quiver-overlay":
                parts = []
                for comp in ("m1", "m2"):
                    partner = path.with_name(path.name.replace("rho_", f"{comp}_", 1))
                    if partner == path or not partner.exists():
                        raise DataError(f"no momentum file {partner.name} next to {path.name}")
                    mvals, mmeta = read_snapshot(partner)
                    if (mmeta["nx"], mmeta["ny"]) != (meta["nx"], meta["ny"]):
                        raise GridMismatch(f"{partner.name} grid differs from {path.name}")
                    parts.append(mvals)
                quiver_overlay(values, parts[0], parts[1], grid, target, title=title)
            else:
                times, positions = traj
                match = [k for k, t in enumerate(times) if abs(t - meta["t"]) <= 1e-9]
                if not match:
                    raise DataError(f"trajectory has no positions at t={meta['t']!r}")
                agents_overlay(values, grid, positions[match[0]], target, tumors, R_imm, R_tum, title)
    return EXIT_OK


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chemotaxis-euler", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override the RNG seed")
        p.add_argument("--snapshots", help="comma-separated snapshot times")
        p.add_argument("--limiter", choices=("upwind", "minmod"))
        p.add_argument("--epsilon", type=int, choices=(0, 1), help="pressure switch")
        p.add_argument("--interactions", help="comma-separated subset of i1,i2,i3 (or 'none')")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("simulate", help="run a macroscopic or agent simulation")
    common(p)
    p.add_argument("--kind", choices=("macro", "macro2pop", "micro"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate-synthetic", help="agent trajectories for calibration")
    common(p)
    p.set_defaults(func=cmd_generate_synthetic)

    p = sub.add_parser("estimate", help="calibrate the two-population model")
    common(p)
    p.add_argument("--data", required=True, help="trajectory CSV (time,agent_id,x,y)")
    p.add_argument("--densities", help="directory of rho_*.csv reference snapshots")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sensitivity", help="relative sensitivity of the final peak density")
    common(p)
    p.add_argument("--data", required=True, help="trajectory CSV (initial positions and data times)")
    p.add_argument("--densities", help="directory of rho_*.csv reference snapshots")
    p.add_argument("--theta", help="comma-separated parameter vector")
    p.add_argument("--report", help="calibration report whose theta_opt is used")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("plot", help="render snapshot files")
    p.add_argument("snapshots", nargs="+", help="rho_*.csv snapshot files")
    p.add_argument("--style", choices=STYLES, default="heatmap")
    p.add_argument("--trajectory", help="trajectory CSV for agents-overlay")
    p.add_argument("--tumors", help="tumour layout CSV for agents-overlay")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, GridMismatch, GridError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalFailure, LinearSolveError, AgentEscape, ForwardFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
