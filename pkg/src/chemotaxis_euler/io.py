"""Trajectory, tumour-layout and JSON artefact files."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .grid import Grid2D, write_snapshot
from .models import SnapshotSeries

TRAJECTORY_COLUMNS = ("time", "agent_id", "x", "y")


class DataError(ValueError):
    """Malformed input data file."""


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectories(path, times, positions) -> Path:
    """CSV with one row per agent and saved time: ``time,agent_id,x,y``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(TRAJECTORY_COLUMNS)
        for t, X in zip(times, positions):
            for k, (x, y) in enumerate(np.asarray(X, dtype=float)):
                out.writerow((_fmt(t), k, _fmt(x), _fmt(y)))
    return path


def read_trajectories(path) -> tuple[list, list]:
    """Return ``(times, positions)`` with positions ordered by agent id."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read trajectory file {path}: {exc}") from exc
    frames: dict = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRAJECTORY_COLUMNS:
            raise DataError(f"{path}: expected header {','.join(TRAJECTORY_COLUMNS)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, k, x, y = float(row[0]), int(row[1]), float(row[2]), float(row[3])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row}") from exc
            if not all(math.isfinite(v) for v in (t, x, y)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            frames.setdefault(t, {})[k] = (x, y)
    if not frames:
        raise DataError(f"{path}: no trajectory rows")
    times = sorted(frames)
    ids = sorted(frames[times[0]])
    positions = []
    for t in times:
        if sorted(frames[t]) != ids:
            raise DataError(f"{path}: agent ids at t={t} differ from those at t={times[0]}")
        positions.append(np.array([frames[t][k] for k in ids], dtype=float))
    return times, positions


def write_tumors(path, layout, R_imm: float) -> Path:
    """Tumour centres and radii; the immune-cell radius is kept in a comment line."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# R_imm={_fmt(R_imm)}\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(("tumor_id", "x", "y", "R_tum"))
        for k, (x, y) in enumerate(layout.centers):
            out.writerow((k, _fmt(x), _fmt(y), _fmt(layout.R_tum)))
    return path


def read_tumors(path) -> tuple[np.ndarray, float, float]:
    """Return ``(centers, R_tum, R_imm)``."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read tumour file {path}: {exc}") from exc
    R_imm = 0.02
    rows = []
    for line in lines:
        if line.startswith("#"):
            for token in line[1:].split():
                if token.startswith("R_imm="):
                    R_imm = float(token.split("=", 1)[1])
            continue
        if line.strip() and not line.startswith("tumor_id"):
            rows.append([float(v) for v in line.split(",")])
    if not rows:
        return np.zeros((0, 2)), 0.0, R_imm
    arr = np.array(rows)
    return arr[:, 1:3], float(arr[0, 3]), R_imm


def clean_json(value):
    """Replace non-finite floats by None and numpy scalars/arrays by builtins."""
    if isinstance(value, dict):
        return {str(k): clean_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean_json(v) for v in value]
    if isinstance(value, np.ndarray):
        return clean_json(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(path, payload) -> Path:
    path = Path(path)
    path.write_text(json.dumps(clean_json(payload), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def write_series(outdir, series: SnapshotSeries, grid: Grid2D, fields=("rho", "m1", "m2", "phi")) -> list:
    """One CSV per field per saved time; returns the snapshot index."""
    outdir = Path(outdir)
    index = []
    for k, (t, state, phi) in enumerate(zip(series.times, series.states, series.phis), start=1):
        values = {"rho": state.rho, "m1": state.m1, "m2": state.m2, "phi": phi}
        files = []
        for name in fields:
            path = outdir / f"{name}_{k:04d}.csv"
            write_snapshot(path, values[name], grid, t)
            files.append(path.name)
        index.append({"time": float(t), "files": files})
    return index
