import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chemotaxis_euler.grid import Grid2D, total_mass
from chemotaxis_euler.kde import BandwidthMatrix, DensityKDE, kde


def _mixture(samples, width, X, Y):
    """Equal-weight mixture of isotropic normals N(x_i, width^2 I), summed point by point."""
    out = np.zeros_like(X)
    norm = 1.0 / (2.0 * math.pi * width**2 * len(samples))
    for sx, sy in samples:
        out += norm * np.exp(-((X - sx) ** 2 + (Y - sy) ** 2) / (2.0 * width**2))
    return out


def test_single_sample_peak_value():
    g = Grid2D(L=4.0, nx=5, ny=5)
    f = kde([[2.0, 2.0]], BandwidthMatrix(1.0, 1.0), g)
    assert f[2, 2] == pytest.approx(1.0 / (2.0 * math.pi), rel=1e-15)
    assert f[2, 2] == pytest.approx(0.15915494309189535, rel=1e-15)


def test_matches_closed_form_mixture():
    g = Grid2D()
    rng = np.random.default_rng(7)
    samples = rng.uniform(0.0, 1.0, size=(80, 2))
    H = BandwidthMatrix(1.2, 0.02)
    X, Y = g.mesh()
    expected = _mixture(samples, H.width, X, Y)
    assert np.max(np.abs(kde(samples, H, g) - expected)) <= 1e-12 * max(1.0, np.max(expected))


def test_unit_mass_away_from_walls():
    g = Grid2D()
    samples = np.random.default_rng(1).uniform(0.3, 0.7, size=(50, 2))
    f = kde(samples, BandwidthMatrix(1.2, 0.02), g)
    assert total_mass(f, g) == pytest.approx(1.0, abs=1e-2)


def test_cutoff_error_is_tiny():
    g = Grid2D()
    samples = np.random.default_rng(2).uniform(0.0, 1.0, size=(30, 2))
    H = BandwidthMatrix(1.2, 0.02)
    full = kde(samples, H, g)
    cut = kde(samples, H, g, cutoff=True)
    assert np.max(np.abs(full - cut)) <= 1e-8 * np.max(full)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 3.0), st.integers(1, 20))
def test_positive_and_smooth(seed, h, m):
    # widths >= 0.05 keep the Gaussian tail above the double-precision underflow on the unit square
    g = Grid2D(nx=41, ny=41)
    samples = np.random.default_rng(seed).uniform(0.0, 1.0, size=(m, 2))
    H = BandwidthMatrix(h, 0.05)
    f = kde(samples, H, g)
    assert np.all(f > 0)
    # second differences bounded by the curvature of the peak kernel value
    peak = 1.0 / (2.0 * math.pi * H.det)
    d2 = np.abs(np.diff(f, 2, axis=0)) / g.dx**2
    assert np.max(d2) <= 1.01 * peak / H.width**2


def test_rejects_bad_input():
    g = Grid2D(nx=5, ny=5)
    with pytest.raises(ValueError):
        BandwidthMatrix(0.0, 1.0)
    with pytest.raises(ValueError):
        kde(np.zeros((3, 3)), BandwidthMatrix(1.0, 1.0), g)


def test_estimator_wrapper_agrees_with_function():
    g = Grid2D(nx=21, ny=21)
    samples = np.random.default_rng(3).uniform(0.0, 1.0, size=(10, 2))
    est = DensityKDE(h=1.5, sigma=0.03).fit(samples)
    np.testing.assert_allclose(est.to_grid(g), kde(samples, BandwidthMatrix(1.5, 0.03), g), rtol=1e-14)
    X, Y = g.mesh()
    pts = np.column_stack([X.ravel(), Y.ravel()])
    np.testing.assert_allclose(est.score_samples(pts).reshape(g.shape), est.to_grid(g), rtol=1e-12)
    assert est.get_params() == {"h": 1.5, "sigma": 0.03, "cutoff": False}
