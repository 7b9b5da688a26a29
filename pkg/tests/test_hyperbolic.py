import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chemotaxis_euler.grid import Grid2D, total_mass
from chemotaxis_euler.hyperbolic import (
    CFLViolation,
    KineticEnsemble,
    PressureLaw,
    cfl_dt,
    enforce_walls,
    flux_A,
    hyperbolic_step,
    maxwellians,
    minmod_phi,
    select_lambda,
    source_eval,
    transport_step,
)

PRESSURELESS = PressureLaw(epsilon=0)
ISENTROPIC = PressureLaw(epsilon=1, rho0=4.0)


def _random_states(rng, n):
    rho = rng.uniform(0.01, 8.0, n)
    m = rng.normal(scale=3.0, size=(2, n))
    return np.vstack([rho, m])


def test_flux_examples():
    A1, A2 = flux_A(np.array([1.0, 0.0, 0.0]), PRESSURELESS)
    assert not np.any(A1) and not np.any(A2)
    A1, A2 = flux_A(np.array([1.0, 1.0, 0.0]), PRESSURELESS)
    np.testing.assert_array_equal(A1, [1.0, 1.0, 0.0])
    np.testing.assert_array_equal(A2, [0.0, 0.0, 0.0])
    A1, _ = flux_A(np.array([5.0, 0.0, 0.0]), ISENTROPIC)
    np.testing.assert_array_equal(A1, [0.0, 1.0, 0.0])


def test_maxwellians_at_rest():
    M = maxwellians(np.array([1.0, 0.0, 0.0]), PRESSURELESS, lam=3.0, a=0.2)
    np.testing.assert_allclose(M, np.tile([0.2, 0.0, 0.0], (5, 1)), atol=1e-16)


@pytest.mark.parametrize("law", [PRESSURELESS, ISENTROPIC], ids=["eps0", "eps1"])
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), lam=st.floats(0.5, 50.0), a=st.floats(0.01, 0.24))
def test_maxwellian_moment_identities(law, seed, lam, a):
    w = _random_states(np.random.default_rng(seed), 64)
    M = maxwellians(w, law, lam, a)
    A1, A2 = flux_A(w, law)
    scale = np.maximum(1.0, np.abs(w))
    assert np.max(np.abs(M.sum(axis=0) - w) / scale) < 1e-13
    assert np.max(np.abs(lam * (M[0] - M[2]) - A1) / np.maximum(1.0, np.abs(A1))) < 1e-13
    assert np.max(np.abs(lam * (M[1] - M[3]) - A2) / np.maximum(1.0, np.abs(A2))) < 1e-13


@pytest.mark.parametrize("lam, dx, expected", [(2.0, 0.02, 0.009), (1.0, 1.0, 0.9), (0.9, 0.02, 0.02)])
def test_cfl_examples(lam, dx, expected):
    assert cfl_dt(lam, dx) == pytest.approx(expected, rel=1e-14)


def test_minmod_examples():
    np.testing.assert_array_equal(minmod_phi([0.5, -1.0, 3.0, np.nan, np.inf]), [0.5, 0.0, 1.0, 0.0, 1.0])


def test_lambda_covers_velocities_and_positivity():
    g = Grid2D(nx=5, ny=5)
    w = np.zeros((3, *g.shape))
    w[0] = 1.0
    w[1] = 2.0
    lam = select_lambda(w, PRESSURELESS, c_safe=1.2, lam_min=1.0, a=0.2)
    # 2 / (2 * 0.2) = 5 dominates 1.2 * 2
    assert lam >= 5.0
    assert select_lambda(np.stack([np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))]), PRESSURELESS) == 1.0
    # positivity of the density components of every Maxwellian
    M = maxwellians(w, PRESSURELESS, lam, 0.2)
    assert np.all(M[:, 0] >= 0)


def _bump_ensemble(g, lam, which=0):
    x = g.x
    f = np.zeros((5, 3, *g.shape))
    f[which, 0] = np.exp(-((x - 0.35) / 0.08) ** 2)[:, None]
    return KineticEnsemble(f, lam)


def _advection_error(n, limiter, T=0.3, lam=1.0):
    g = Grid2D(L=1.0, nx=n, ny=4)
    ens = _bump_ensemble(g, lam)
    steps = int(np.ceil(T / cfl_dt(lam, g.dx)))
    dt = T / steps
    for _ in range(steps):
        ens = transport_step(ens, dt, g, limiter)
    exact = np.exp(-((g.x - 0.35 - lam * T) / 0.08) ** 2)
    return np.sum(np.abs(ens.f[0, 0, :, 1] - exact)) * g.dx


def transport_orders(limiter, sizes=(101, 201, 401)):
    errs = np.array([_advection_error(n, limiter) for n in sizes])
    return np.log2(errs[:-1] / errs[1:])


def test_limited_transport_is_second_order():
    assert np.min(transport_orders("minmod")) >= 1.8


def test_upwind_transport_is_first_order():
    assert np.min(transport_orders("upwind")) >= 0.95


def test_constant_populations_unchanged():
    g = Grid2D(nx=9, ny=9)
    f = np.ones((5, 3, *g.shape))
    f[:, 1:] = 0.0
    out = transport_step(KineticEnsemble(f, 2.0), cfl_dt(2.0, g.dx), g)
    np.testing.assert_allclose(out.f, f, atol=1e-15)


def test_cfl_violation_rejected():
    g = Grid2D(nx=9, ny=9)
    ens = KineticEnsemble(np.zeros((5, 3, *g.shape)), 1.0)
    with pytest.raises(CFLViolation):
        transport_step(ens, 1.01 * cfl_dt(1.0, g.dx), g)
    with pytest.raises(ValueError):
        transport_step(ens, 0.01, g, limiter="superbee")


@pytest.mark.parametrize("limiter", ["upwind", "minmod"])
def test_transport_conserves_density_mass(limiter):
    g = Grid2D(nx=31, ny=31)
    rng = np.random.default_rng(4)
    w = np.stack([rng.uniform(0.1, 2.0, g.shape), rng.normal(size=g.shape), rng.normal(size=g.shape)])
    # states fed to the transport always satisfy u.n = 0 on the walls
    enforce_walls(w)
    lam = select_lambda(w, PRESSURELESS)
    ens = KineticEnsemble(maxwellians(w, PRESSURELESS, lam), lam)
    m0 = total_mass(ens.moments()[0], g)
    for _ in range(100):
        ens = transport_step(ens, cfl_dt(lam, g.dx), g, limiter)
    assert abs(total_mass(ens.moments()[0], g) - m0) <= 1e-10 * m0


def test_limiter_off_matches_upwind_formula():
    g = Grid2D(nx=12, ny=6)
    rng = np.random.default_rng(9)
    f = rng.random((5, 3, *g.shape))
    lam = 1.5
    dt = cfl_dt(lam, g.dx)
    nu = lam * dt / g.dx
    out = transport_step(KineticEnsemble(f, lam), dt, g, "upwind")
    interior = f[0][:, 1:-1] - nu * (f[0][:, 1:-1] - f[0][:, :-2])
    np.testing.assert_allclose(out.f[0][:, 1:-1], interior, rtol=0, atol=1e-14)


def test_limited_transport_stays_nonnegative():
    g = Grid2D(nx=81, ny=81)
    X, Y = g.mesh()
    rho = np.exp(-((X - 0.4) ** 2 + (Y - 0.6) ** 2) / 0.005)
    w = np.stack([rho, 0.8 * rho, -0.5 * rho])
    lam = select_lambda(w, PRESSURELESS)
    ens = KineticEnsemble(maxwellians(w, PRESSURELESS, lam), lam)
    for _ in range(40):
        ens = transport_step(ens, cfl_dt(lam, g.dx), g)
        assert ens.moments()[0].min() >= -1e-12


def test_source_examples():
    g = Grid2D(nx=5, ny=5)
    w = np.zeros((3, *g.shape))
    w[0] = 1.0
    w[1] = 1.0
    phi = g.zeros()
    I = np.ones((2, *g.shape))
    F = source_eval(w, phi, np.zeros_like(I), eta=0.0, alpha=1.0, epsilon=0, grid=g)
    np.testing.assert_array_equal(F[:, 2, 2], [0.0, -1.0, 0.0])
    assert not np.any(source_eval(np.zeros_like(w), phi, I, 1.0, 1.0, 0, g))
    # epsilon = 1 switches the interaction term off
    F1 = source_eval(w, phi, I, eta=0.0, alpha=0.0, epsilon=1, grid=g)
    assert not np.any(F1)


def test_rest_state_is_equilibrium():
    # uniform density at rest: the relaxation viscosity smooths any non-uniform profile
    g = Grid2D(nx=21, ny=21)
    rho = np.full(g.shape, 1.3)
    w = np.stack([rho, np.zeros_like(rho), np.zeros_like(rho)])
    out = hyperbolic_step(w, np.full(g.shape, 2.0), np.zeros((2, *g.shape)), PRESSURELESS, 0.01, g, lam=1.0)
    np.testing.assert_allclose(out, w, atol=1e-12)


@pytest.mark.parametrize("relax", [False, True], ids=["explicit", "point-implicit"])
def test_step_conserves_mass_over_100_steps(relax):
    g = Grid2D(nx=31, ny=31)
    X, Y = g.mesh()
    rho = 1.0 + 0.5 * np.cos(np.pi * X) * np.cos(np.pi * Y)
    w = np.stack([rho, np.zeros_like(rho), np.zeros_like(rho)])
    phi = np.exp(-((X - 0.3) ** 2 + (Y - 0.6) ** 2) / 0.05)
    m0 = total_mass(rho, g)
    I = np.zeros((2, *g.shape))
    for _ in range(100):
        lam = select_lambda(w, PRESSURELESS)
        w = hyperbolic_step(w, phi, I, PRESSURELESS, cfl_dt(lam, g.dx), g, eta=0.5, alpha=1.0, lam=lam,
                            relax_rate=np.zeros(g.shape) if relax else None)
    assert abs(total_mass(w[0], g) - m0) <= 1e-10 * m0


def test_point_implicit_damping_is_stable_for_stiff_rates():
    g = Grid2D(nx=11, ny=11)
    w = np.stack([np.ones(g.shape), np.full(g.shape, 0.3), np.zeros(g.shape)])
    w[1, [0, -1], :] = 0.0
    out = hyperbolic_step(w, g.zeros(), np.zeros((2, *g.shape)), PRESSURELESS, 0.01, g,
                          alpha=1e4, relax_rate=np.zeros(g.shape))
    assert np.max(np.abs(out[1])) < np.max(np.abs(w[1]))
