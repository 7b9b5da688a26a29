import numpy as np
import pytest

from chemotaxis_euler.estimation import (
    PENALTY,
    THETA_NAMES,
    EstimationProblem,
    ForwardFailure,
    MacroCalibrator,
    default_calibration_config,
    estimate,
    forward_densities,
    objective_J,
    regularization,
    regularized_K,
    residuals,
    sensitivity,
    sensitivity_summary,
)
from chemotaxis_euler.grid import Grid2D
from chemotaxis_euler.models import TumorLayout

THETA_STAR = np.array([6.0, 500.0, 4.0, 2000.0, 850.0, 1.2])
TIMES = (0.05, 0.1)


def _positions(seed=0, n=40):
    return np.random.default_rng(seed).uniform(0.1, 0.9, size=(n, 2))


def _problem(theta0=THETA_STAR, densities=None, **kw):
    base = default_calibration_config(grid=Grid2D(nx=21, ny=21))
    stub = [np.ones(base.grid.shape)] * len(TIMES)
    return EstimationProblem(theta0=theta0, base=base, layout=TumorLayout(), initial_positions=_positions(),
                             data_times=TIMES, densities=stub if densities is None else densities, **kw)


@pytest.fixture(scope="module")
def clean_data():
    return forward_densities(THETA_STAR, _problem()).densities()


def test_parameter_order():
    assert THETA_NAMES == ("eta", "w_rep", "w_adh", "beta", "w_rep_tum", "h")


def test_misfit_vanishes_on_own_output(clean_data):
    assert objective_J(THETA_STAR, _problem(densities=clean_data)) == 0.0


def test_misfit_against_doubled_data_is_one_quarter(clean_data):
    # |rho - 2 rho| / |2 rho| = 1/2 at every snapshot
    doubled = [2.0 * d for d in clean_data]
    assert objective_J(THETA_STAR, _problem(densities=doubled)) == pytest.approx(0.25, rel=1e-12)


def test_residual_norm_equals_objective(clean_data):
    p = _problem(densities=[1.1 * d for d in clean_data])
    r = residuals(THETA_STAR, p)
    assert r @ r == pytest.approx(objective_J(THETA_STAR, p), rel=1e-14)


def test_regularization_units(clean_data):
    rel = _problem(densities=clean_data)
    assert regularized_K(THETA_STAR, rel) == objective_J(THETA_STAR, rel)
    shifted = THETA_STAR.copy()
    shifted[1] += 500.0
    assert regularization(shifted, rel) == pytest.approx(1e-6, rel=1e-12)
    absolute = _problem(densities=clean_data, regularization="absolute", lambda2=1e-4)
    shifted = THETA_STAR.copy()
    shifted[0] += 1.0
    assert regularization(shifted, absolute) == pytest.approx(1e-4, rel=1e-12)


def test_failed_forward_run_gets_penalty():
    p = _problem()
    bad = THETA_STAR.copy()
    bad[5] = 0.0  # zero bandwidth
    with pytest.raises(ForwardFailure):
        forward_densities(bad, p)
    assert objective_J(bad, p) == PENALTY


def test_problem_validation():
    with pytest.raises(ValueError, match="6 components"):
        _problem(theta0=np.ones(5))
    with pytest.raises(ValueError, match="increasing"):
        EstimationProblem(theta0=THETA_STAR, base=default_calibration_config(), layout=TumorLayout(),
                          initial_positions=_positions(), data_times=(0.1, 0.05), densities=[0, 0])
    with pytest.raises(ValueError, match="reference"):
        EstimationProblem(theta0=THETA_STAR, base=default_calibration_config(), layout=TumorLayout(),
                          initial_positions=_positions(), data_times=(0.1,))
    with pytest.raises(ValueError, match="outside"):
        _problem(lower=np.full(6, 10.0), upper=np.full(6, 1e4))


def test_start_at_minimum_stays_there(clean_data):
    res = estimate(_problem(densities=clean_data, max_iter=5))
    np.testing.assert_allclose(res.theta_opt, THETA_STAR, rtol=1e-12)
    assert res.E == 0.0 and res.converged


def test_trust_region_respects_bounds_and_decreases(clean_data):
    theta0 = 1.3 * THETA_STAR
    upper = 1.35 * THETA_STAR
    lower = 1.25 * THETA_STAR
    lower[5] = 1.0
    upper[5] = 2.0
    p = _problem(theta0=theta0, densities=clean_data, lower=lower, upper=upper, max_iter=6)
    res = estimate(p)
    assert np.all(res.theta_opt >= lower) and np.all(res.theta_opt <= upper)
    Ks = [row["K"] for row in res.trace]
    assert np.all(np.diff(Ks) <= 0)
    assert res.K <= Ks[0]


def test_fixed_components_do_not_move(clean_data):
    theta0 = THETA_STAR.copy()
    theta0[5] = 1.5
    lower = theta0.copy()
    upper = theta0.copy()
    lower[5], upper[5] = 0.5, 3.0
    res = estimate(_problem(theta0=theta0, densities=clean_data, lower=lower, upper=upper, max_iter=4))
    np.testing.assert_array_equal(res.theta_opt[:5], theta0[:5])
    assert res.theta_opt[5] != theta0[5]
    assert res.K < res.trace[0]["K"]


def test_sensitivity_skips_zero_components(clean_data):
    theta = THETA_STAR.copy()
    theta[4] = 0.0
    rows = sensitivity(theta, _problem(densities=clean_data), output=lambda th, p: 1.0 + th[0] ** 2)
    summary = sensitivity_summary(rows)
    assert summary["w_rep_tum"] is None
    # Y = 1 + eta^2, Y0 = 37: |Y(6.3) - 37| / 37 * 6 / 0.3
    assert summary["eta"] == pytest.approx((6.3**2 - 36) / 37 * 20, rel=1e-12)
    assert summary["w_rep"] == 0.0
    assert len(rows) == 12


def test_calibrator_params_and_unfitted_error():
    cal = MacroCalibrator(lambda2=1e-5)
    params = cal.get_params()
    assert params["lambda2"] == 1e-5 and params["theta0"] == (6.0, 500.0, 4.0, 2000.0, 0.0, 1.2)
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        cal.predict()
