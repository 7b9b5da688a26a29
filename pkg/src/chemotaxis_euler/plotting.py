"""Static figures: density heatmaps, momentum quivers and agent overlays."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Circle  # noqa: E402
import numpy as np  # noqa: E402

from .grid import Grid2D  # noqa: E402

STYLES = ("heatmap", "quiver-overlay", "agents-overlay")
# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


class GridMismatch(ValueError):
    pass


def _check(field: np.ndarray, grid: Grid2D, what: str) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    if field.shape != grid.shape:
        raise GridMismatch(f"{what} has shape {field.shape}, grid is {grid.shape}")
    return field


def _base(rho, grid: Grid2D, title: str):
    fig, ax = plt.subplots(figsize=(5, 4.3), dpi=100)
    mesh = ax.pcolormesh(grid.x, grid.y, rho.T, shading="gouraud", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="density")
    ax.set_aspect("equal")
    ax.set_xlim(0, grid.L)
    ax.set_ylim(0, grid.L)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def heatmap(rho, grid: Grid2D, path, title: str = "") -> Path:
    rho = _check(rho, grid, "density")
    fig, _ = _base(rho, grid, title)
    return _save(fig, path)


def quiver_overlay(rho, m1, m2, grid: Grid2D, path, stride: int = 3, title: str = "") -> Path:
    """Density heatmap with momentum arrows sampled every ``stride`` nodes."""
    rho = _check(rho, grid, "density")
    m1 = _check(m1, grid, "momentum x")
    m2 = _check(m2, grid, "momentum y")
    fig, ax = _base(rho, grid, title)
    X, Y = grid.mesh()
    sl = (slice(None, None, stride), slice(None, None, stride))
    ax.quiver(X[sl], Y[sl], m1[sl], m2[sl], color="k", angles="xy")
    return _save(fig, path)


def agents_overlay(rho, grid: Grid2D, positions, path, tumors=(), R_imm: float = 0.02,
                   R_tum: float = 0.05, title: str = "") -> Path:
    """Density heatmap with immune cells and tumour cells drawn as circles of their radii."""
    rho = _check(rho, grid, "density")
    fig, ax = _base(rho, grid, title)
    for x, y in np.atleast_2d(np.asarray(positions, dtype=float)):
        ax.add_patch(Circle((x, y), R_imm, fill=False, edgecolor="k", linewidth=0.8))
    for x, y in np.asarray(tumors, dtype=float).reshape(-1, 2):
        ax.add_patch(Circle((x, y), R_tum, fill=True, facecolor="none", edgecolor="r", linewidth=1.5))
    return _save(fig, path)
