"""Uniform node-centred grid on a square domain and the discrete operators shared by all solvers.

Fields are plain ``numpy`` arrays. A scalar field has shape ``(nx, ny)`` with
``field[i, j]`` the value at ``(x_i, y_j)``; a vector field has shape
``(2, nx, ny)``. Boundary nodes are part of the grid; homogeneous Neumann data
is realised by mirroring about the boundary node (ghost ``f[-1] = f[1]``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

#: density floor used when recovering velocities from momenta
RHO_FLOOR = 1e-10


class GridError(ValueError):
    """Raised for grids or fields that violate the grid contract."""


@dataclass(frozen=True)
class Grid2D:
    """Uniform rectangular discretisation of ``[0, L] x [0, L]``.

    Parameters
    ----------
    L : float
        Side length of the square domain.
    nx, ny : int
        Number of nodes per axis, boundary nodes included.
    """

    L: float = 1.0
    nx: int = 51
    ny: int = 51
    dx: float = field(init=False)
    dy: float = field(init=False)

    def __post_init__(self):
        if self.L <= 0:
            raise GridError(f"domain side L must be positive, got {self.L}")
        if self.nx < 2 or self.ny < 2:
            raise GridError(f"need at least 2 nodes per axis, got {self.nx}x{self.ny}")
        object.__setattr__(self, "dx", self.L / (self.nx - 1))
        object.__setattr__(self, "dy", self.L / (self.ny - 1))

    @classmethod
    def from_spacing(cls, dx: float = 0.02, L: float = 1.0) -> "Grid2D":
        n = int(round(L / dx)) + 1
        return cls(L=L, nx=n, ny=n)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.nx)

    @property
    def y(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.ny)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates as two ``(nx, ny)`` arrays (``ij`` indexing)."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    def weights(self) -> np.ndarray:
        """Quadrature weights: ``dx*dy`` inside, halved once per boundary edge touched."""
        wx = np.ones(self.nx)
        wy = np.ones(self.ny)
        wx[[0, -1]] = 0.5
        wy[[0, -1]] = 0.5
        return np.outer(wx, wy) * (self.dx * self.dy)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def check(self, f: np.ndarray, vector: bool = False) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        expected = (2, *self.shape) if vector else self.shape
        if f.shape != expected:
            raise GridError(f"field shape {f.shape} does not match grid {expected}")
        return f


@dataclass(frozen=True)
class ConservedState:
    """Macroscopic unknowns ``w = (rho, rho*u1, rho*u2)`` on a grid."""

    rho: np.ndarray
    m1: np.ndarray
    m2: np.ndarray

    @classmethod
    def from_array(cls, w: np.ndarray) -> "ConservedState":
        return cls(w[0].copy(), w[1].copy(), w[2].copy())

    @classmethod
    def at_rest(cls, rho: np.ndarray) -> "ConservedState":
        rho = np.asarray(rho, dtype=float)
        return cls(rho.copy(), np.zeros_like(rho), np.zeros_like(rho))

    def as_array(self) -> np.ndarray:
        return np.stack([self.rho, self.m1, self.m2])

    def velocity(self) -> np.ndarray:
        return velocity(self.as_array())


def velocity(w: np.ndarray, rho_floor: float = RHO_FLOOR) -> np.ndarray:
    """Recover ``u = m / max(rho, rho_floor)`` from a stacked state ``(3, ...)``."""
    denom = np.maximum(w[0], rho_floor)
    return w[1:] / denom


def total_mass(f: np.ndarray, grid: Grid2D) -> float:
    """Integral of a scalar field by the half-weighted rectangle rule."""
    f = grid.check(f)
    return float(np.sum(f * grid.weights()))


def _require_stencil(grid: Grid2D):
    if grid.nx < 3 or grid.ny < 3:
        raise GridError(f"stencil operators need at least 3x3 nodes, got {grid.nx}x{grid.ny}")


def gradient_neumann(f: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Centred three-point gradient; the normal derivative vanishes on the boundary."""
    _require_stencil(grid)
    f = grid.check(f)
    g = np.zeros((2, *grid.shape))
    g[0, 1:-1, :] = (f[2:, :] - f[:-2, :]) / (2.0 * grid.dx)
    g[1, :, 1:-1] = (f[:, 2:] - f[:, :-2]) / (2.0 * grid.dy)
    return g


def laplacian_5pt(f: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Five-point Laplacian with mirrored ghost nodes (homogeneous Neumann)."""
    _require_stencil(grid)
    f = grid.check(f)
    p = np.pad(f, 1, mode="reflect")
    return (p[2:, 1:-1] - 2.0 * f + p[:-2, 1:-1]) / grid.dx**2 + (
        p[1:-1, 2:] - 2.0 * f + p[1:-1, :-2]
    ) / grid.dy**2


def bilinear_interpolate(f: np.ndarray, grid: Grid2D, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a scalar or vector field at ``(m, 2)`` points.

    Points outside the domain are clamped to it.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    sx = np.clip(points[:, 0] / grid.dx, 0.0, grid.nx - 1)
    sy = np.clip(points[:, 1] / grid.dy, 0.0, grid.ny - 1)
    i0 = np.minimum(np.floor(sx).astype(int), grid.nx - 2)
    j0 = np.minimum(np.floor(sy).astype(int), grid.ny - 2)
    tx = sx - i0
    ty = sy - j0
    f = np.asarray(f)

    def corner(di, dj):
        return f[..., i0 + di, j0 + dj]

    return (
        corner(0, 0) * (1 - tx) * (1 - ty)
        + corner(1, 0) * tx * (1 - ty)
        + corner(0, 1) * (1 - tx) * ty
        + corner(1, 1) * tx * ty
    )


# --- snapshot persistence -------------------------------------------------


def write_snapshot(path: str | Path, f: np.ndarray, grid: Grid2D, t: float) -> Path:
    """Write one field at one time as CSV; row ``i`` holds the nodes ``x_i``."""
    path = Path(path)
    f = grid.check(f)
    lines = [f"# t={float(t)!r} nx={grid.nx} ny={grid.ny} dx={float(grid.dx)!r}"]
    lines.extend(",".join(format(v, ".17g") for v in row) for row in f)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_snapshot(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a snapshot written by :func:`write_snapshot`.

    Returns the field and the header as a dict with keys ``t``, ``nx``, ``ny``, ``dx``.
    """
    path = Path(path)
    with path.open() as fh:
        header = fh.readline()
    if not header.startswith("#"):
        raise GridError(f"{path}: missing snapshot header")
    meta = {}
    for token in header[1:].split():
        key, _, value = token.partition("=")
        meta[key] = int(value) if key in ("nx", "ny") else float(value)
    missing = {"t", "nx", "ny", "dx"} - meta.keys()
    if missing:
        raise GridError(f"{path}: header lacks {sorted(missing)}")
    values = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if values.shape != (meta["nx"], meta["ny"]):
        raise GridError(f"{path}: data shape {values.shape} disagrees with header")
    return values, meta
