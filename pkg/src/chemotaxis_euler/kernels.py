"""Pairwise interaction functions and the nonlocal integral operators built from them.

Pointwise kernels accept position differences as arrays of shape ``(..., 2)``
so the same code serves the agent model (pair differences) and the grid
operators (node offsets). The grid operators are discrete convolutions over all
nodes with the half-weighted quadrature of :func:`grid.total_mass`; density is
taken to vanish outside the domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import fft as sfft

from .grid import Grid2D


@dataclass(frozen=True)
class KernelParams:
    """Strengths and radii of the alignment, adhesion/repulsion and tumour kernels."""

    beta: float = 2000.0
    varsigma: float = 1.0
    w_rep: float = 500.0
    w_adh: float = 4.0
    R_rep: float = 0.04
    R_adh: float = 0.06
    w_rep_tum: float = 0.0
    R_rep_tum: float = 0.07
    R_align: float = 0.06
    align_cutoff: bool = False

    def __post_init__(self):
        for name in ("beta", "w_rep", "w_adh", "w_rep_tum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.varsigma <= 0:
            raise ValueError(f"varsigma must be > 0, got {self.varsigma}")
        if not 0 < self.R_rep:
            raise ValueError(f"R_rep must be > 0, got {self.R_rep}")
        if not self.R_adh > self.R_rep:
            raise ValueError(f"R_adh > R_rep violated: R_adh={self.R_adh}, R_rep={self.R_rep}")
        if self.R_rep_tum <= 0:
            raise ValueError(f"R_rep_tum must be > 0, got {self.R_rep_tum}")
        if self.R_align <= 0:
            raise ValueError(f"R_align must be > 0, got {self.R_align}")


def gamma_D(r, p: KernelParams):
    """Cucker-Smale communication rate ``beta / (1 + r^2)^varsigma``."""
    r = np.asarray(r, dtype=float)
    out = p.beta / (1.0 + r * r) ** p.varsigma
    if p.align_cutoff:
        out = np.where(r > p.R_align, 0.0, out)
    return out


def _norm(d: np.ndarray) -> np.ndarray:
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def gamma1(dv, dx, p: KernelParams) -> np.ndarray:
    """Alignment force ``gamma_D(|dx|) * dv`` with ``dv = v_j - v_i`` and ``dx = x_i - x_j``."""
    dv = np.asarray(dv, dtype=float)
    r = _norm(np.asarray(dx, dtype=float))
    return gamma_D(r, p)[..., None] * dv


def _radial(dx: np.ndarray, magnitude: np.ndarray, r: np.ndarray) -> np.ndarray:
    # magnitude acts along (x_j - x_i)/r = -dx/r; zero at r = 0
    safe = np.where(r > 0, r, 1.0)[..., None]
    return np.where(r[..., None] > 0, -magnitude[..., None] * (dx / safe), 0.0)


def gamma2(dx, p: KernelParams) -> np.ndarray:
    """Short-range ``1/r`` repulsion and linear adhesion between immune cells."""
    dx = np.asarray(dx, dtype=float)
    r = _norm(dx)
    safe = np.where(r > 0, r, 1.0)
    mag = np.where(
        r <= p.R_rep,
        -p.w_rep * (1.0 / safe - 1.0 / p.R_rep),
        np.where(r <= p.R_adh, p.w_adh * (r - p.R_rep), 0.0),
    )
    return _radial(dx, mag, r)


def gamma3(dx, p: KernelParams) -> np.ndarray:
    """Immune-tumour repulsion; ``dx = x_i - y_j``."""
    dx = np.asarray(dx, dtype=float)
    r = _norm(dx)
    safe = np.where(r > 0, r, 1.0)
    mag = np.where(r <= p.R_rep_tum, -p.w_rep_tum * (1.0 / safe - 1.0 / p.R_rep_tum), 0.0)
    return _radial(dx, mag, r)


# --- grid convolutions ----------------------------------------------------


def offset_mesh(grid: Grid2D) -> np.ndarray:
    """All node offsets ``x - y`` as an array of shape ``(2nx-1, 2ny-1, 2)``."""
    ox = np.arange(-(grid.nx - 1), grid.nx) * grid.dx
    oy = np.arange(-(grid.ny - 1), grid.ny) * grid.dy
    OX, OY = np.meshgrid(ox, oy, indexing="ij")
    return np.stack([OX, OY], axis=-1)


class GridConvolution:
    """Linear convolution ``out(x_i) = sum_j K(x_i - x_j) f(x_j) w_j`` evaluated by FFT.

    ``kernel`` holds ``K`` on :func:`offset_mesh`; leading axes are components.
    """

    def __init__(self, grid: Grid2D, kernel: np.ndarray):
        self.grid = grid
        kernel = np.asarray(kernel, dtype=float)
        nx, ny = grid.shape
        self.size = (sfft.next_fast_len(2 * nx - 1, real=True), sfft.next_fast_len(2 * ny - 1, real=True))
        lead = kernel.shape[:-2]
        padded = np.zeros((*lead, *self.size))
        # offset k sits at index k mod P so the circular product equals the linear one
        padded[..., : nx, : ny] = kernel[..., nx - 1 :, ny - 1 :]
        padded[..., -(nx - 1) :, : ny] = kernel[..., : nx - 1, ny - 1 :]
        padded[..., : nx, -(ny - 1) :] = kernel[..., nx - 1 :, : ny - 1]
        padded[..., -(nx - 1) :, -(ny - 1) :] = kernel[..., : nx - 1, : ny - 1]
        self._khat = sfft.rfft2(padded)
        self._w = grid.weights()

    def transform(self, f: np.ndarray) -> np.ndarray:
        """Spectrum of the weighted, zero-padded field(s)."""
        return sfft.rfft2(np.asarray(f) * self._w, s=self.size)

    def apply_hat(self, fhat: np.ndarray) -> np.ndarray:
        nx, ny = self.grid.shape
        return sfft.irfft2(self._khat * fhat, s=self.size)[..., :nx, :ny]

    def __call__(self, f: np.ndarray) -> np.ndarray:
        return self.apply_hat(self.transform(f))


class NonlocalOperator:
    """Cached alignment, adhesion/repulsion and tumour-repulsion integrals on one grid."""

    def __init__(self, grid: Grid2D, p: KernelParams):
        self.grid = grid
        self.params = p
        offsets = offset_mesh(grid)
        r = _norm(offsets)
        self._align = GridConvolution(grid, gamma_D(r, p))
        self._attr = GridConvolution(grid, np.moveaxis(gamma2(offsets, p), -1, 0))
        self._tum = GridConvolution(grid, np.moveaxis(gamma3(offsets, p), -1, 0))

    def alignment_parts(self, rho: np.ndarray, m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``conv(gamma_D, rho*u)`` (vector) and ``conv(gamma_D, rho)`` (scalar).

        ``I1 = conv(gamma_D, m) - u * conv(gamma_D, rho)``.
        """
        stacked = np.concatenate([rho[None], m], axis=0)
        out = self._align(stacked)
        return out[1:], out[0]

    def alignment(self, rho: np.ndarray, u: np.ndarray) -> np.ndarray:
        conv_m, conv_rho = self.alignment_parts(rho, rho * u)
        return conv_m - u * conv_rho

    def attr_rep(self, rho: np.ndarray) -> np.ndarray:
        return self._attr(rho)

    def tumor(self, zeta: np.ndarray) -> np.ndarray:
        return self._tum(zeta)


@lru_cache(maxsize=16)
def nonlocal_operator(grid: Grid2D, p: KernelParams) -> NonlocalOperator:
    return NonlocalOperator(grid, p)


def nonlocal_alignment(rho: np.ndarray, u: np.ndarray, p: KernelParams, grid: Grid2D) -> np.ndarray:
    """Alignment integral ``I1(x) = sum_y gamma_D(|x-y|) (u(y) - u(x)) rho(y) w_y``."""
    return nonlocal_operator(grid, p).alignment(grid.check(rho), grid.check(u, vector=True))


def nonlocal_attr_rep(rho: np.ndarray, p: KernelParams, grid: Grid2D) -> np.ndarray:
    """Adhesion/repulsion integral ``I2(x) = sum_y gamma2(x-y) rho(y) w_y``."""
    return nonlocal_operator(grid, p).attr_rep(grid.check(rho))


def nonlocal_tumor(zeta: np.ndarray, p: KernelParams, grid: Grid2D) -> np.ndarray:
    """Tumour repulsion integral ``I3(x) = sum_y gamma3(x-y) zeta(y) w_y``.

    The tumour density is fixed in time, so callers compute this once per run.
    """
    return nonlocal_operator(grid, p).tumor(grid.check(zeta))
