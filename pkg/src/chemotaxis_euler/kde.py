"""Gaussian kernel density estimates on the grid, turning cell positions into densities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .grid import Grid2D

#: support radius (in bandwidths) of the optional truncated kernel
CUTOFF_BANDWIDTHS = 6.0


@dataclass(frozen=True)
class BandwidthMatrix:
    """Diagonal bandwidth ``H = diag(h sigma, h sigma)``."""

    h: float
    sigma: float

    def __post_init__(self):
        if self.h <= 0 or self.sigma <= 0:
            raise ValueError(f"bandwidth factors must be positive, got h={self.h}, sigma={self.sigma}")

    @property
    def width(self) -> float:
        return self.h * self.sigma

    @property
    def det(self) -> float:
        return self.width**2


def kde(samples, H: BandwidthMatrix, grid: Grid2D, cutoff: bool = False) -> np.ndarray:
    """Evaluate ``(1/(m det H)) sum_i K(H^-1 (x - x_i))`` at every grid node.

    ``K`` is the standard bivariate Gaussian. With ``cutoff=True`` kernels are
    dropped beyond six bandwidths, where their relative size is below 2e-8.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 1 or samples.shape[1] != 2:
        raise ValueError(f"expected an (m, 2) array of positions, got shape {samples.shape}")
    bw = H.width
    # separable Gaussian: exp(-|z|^2/2) = exp(-zx^2/2) exp(-zy^2/2)
    zx = (grid.x[None, :] - samples[:, 0:1]) / bw
    zy = (grid.y[None, :] - samples[:, 1:2]) / bw
    ex = np.exp(-0.5 * zx * zx)
    ey = np.exp(-0.5 * zy * zy)
    if cutoff:
        ex = np.where(np.abs(zx) > CUTOFF_BANDWIDTHS, 0.0, ex)
        ey = np.where(np.abs(zy) > CUTOFF_BANDWIDTHS, 0.0, ey)
    return ex.T @ ey / (2.0 * np.pi * samples.shape[0] * H.det)


class DensityKDE(BaseEstimator):
    """Scikit-learn style wrapper: fit on positions, evaluate on points or on a grid.

    Parameters
    ----------
    h : float
        Bandwidth factor.
    sigma : float
        Cell radius; the kernel width is ``h * sigma``.
    cutoff : bool
        Truncate kernels beyond six widths.
    """

    def __init__(self, h: float = 1.2, sigma: float = 0.02, cutoff: bool = False):
        self.h = h
        self.sigma = sigma
        self.cutoff = cutoff

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=1)
        if X.shape[1] != 2:
            raise ValueError(f"DensityKDE expects 2D positions, got {X.shape[1]} columns")
        self.bandwidth_ = BandwidthMatrix(self.h, self.sigma)
        self.samples_ = X
        self.n_features_in_ = 2
        return self

    def score_samples(self, X) -> np.ndarray:
        """Density at arbitrary points ``X`` of shape ``(k, 2)``."""
        check_is_fitted(self, "samples_")
        X = check_array(X)
        bw = self.bandwidth_.width
        d2 = ((X[:, None, :] - self.samples_[None, :, :]) ** 2).sum(-1) / bw**2
        return np.exp(-0.5 * d2).sum(axis=1) / (2.0 * np.pi * len(self.samples_) * self.bandwidth_.det)

    def to_grid(self, grid: Grid2D) -> np.ndarray:
        check_is_fitted(self, "samples_")
        return kde(self.samples_, self.bandwidth_, grid, cutoff=self.cutoff)
