"""Calibration of the two-population macroscopic model against density snapshots.

The parameter vector is ``theta = [eta, w_rep, w_adh, beta, w_rep_tum, h]``.
Reference densities come either from fixed fields or from agent positions
smoothed by a kernel density estimate whose bandwidth factor is ``h``.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .hyperbolic import BlowUp
from .kde import BandwidthMatrix, kde
from .models import MacroConfig, NumericalFailure, TumorLayout, plan_schedule, run_macro_twopop
from .parabolic import LinearSolveError

logger = logging.getLogger(__name__)

THETA_NAMES = ("eta", "w_rep", "w_adh", "beta", "w_rep_tum", "h")
#: objective value assigned to parameter vectors whose forward run fails
PENALTY = 1e6
#: blow-up factor used by calibration forward runs (only runaway growth is a failure)
CALIBRATION_BLOWUP_FACTOR = 1e3


class ForwardFailure(RuntimeError):
    pass


@dataclass
class EstimationProblem:
    """Everything needed to evaluate the calibration objective.

    Parameters
    ----------
    theta0 : array of 6
        Starting point and regularisation anchor.
    base : MacroConfig
        Fixed settings of the forward model. ``eta``, the interaction strengths,
        ``T`` and ``snapshot_times`` are overwritten per evaluation.
    layout : TumorLayout
        Fixed tumour cells.
    initial_positions : (N, 2) array
        Agent positions at ``t = 0``; their KDE is the initial density.
    data_times : sequence of float
        Times of the reference snapshots (all > 0).
    trajectories : list of (N, 2) arrays, optional
        Agent positions at ``data_times``; smoothed with bandwidth ``h`` at every
        evaluation.
    densities : list of arrays, optional
        Fixed reference densities at ``data_times`` (used when ``trajectories``
        is None).
    """

    theta0: np.ndarray
    base: MacroConfig
    layout: TumorLayout
    initial_positions: np.ndarray
    data_times: tuple
    trajectories: list | None = None
    densities: list | None = None
    R_imm: float = 0.02
    lambda2: float = 1e-6
    bound_factor: float = 50.0
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    penalty: float = PENALTY
    fd_step: float = 1e-3
    max_iter: int = 200
    fixed_time_grid: bool = True
    regularization: str = "relative"
    zeta: np.ndarray | None = field(default=None, repr=False)
    _schedule: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=float)
        if self.theta0.shape != (6,):
            raise ValueError(f"theta0 must have 6 components, got shape {self.theta0.shape}")
        if np.any(self.theta0 < 0) or not np.all(np.isfinite(self.theta0)):
            raise ValueError("theta0 components must be finite and non-negative")
        self.initial_positions = np.atleast_2d(np.asarray(self.initial_positions, dtype=float))
        self.data_times = tuple(float(t) for t in self.data_times)
        if len(self.data_times) < 1:
            raise ValueError("need at least one data time")
        if any(t <= 0 for t in self.data_times) or list(self.data_times) != sorted(set(self.data_times)):
            raise ValueError("data_times must be positive and strictly increasing")
        if self.trajectories is None and self.densities is None:
            raise ValueError("provide reference trajectories or densities")
        ref = self.trajectories if self.trajectories is not None else self.densities
        if len(ref) != len(self.data_times):
            raise ValueError(f"{len(ref)} reference snapshots for {len(self.data_times)} data times")
        if self.lower is None:
            self.lower = np.zeros(6)
        if self.upper is None:
            self.upper = self.bound_factor * self.theta0
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds exceed upper bounds")
        if np.any(self.theta0 < self.lower) or np.any(self.theta0 > self.upper):
            raise ValueError("theta0 lies outside the bounds")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.regularization not in ("relative", "absolute"):
            raise ValueError(f"regularization must be 'relative' or 'absolute', got {self.regularization!r}")
        if self.zeta is None:
            from .models import tumor_density

            self.zeta = tumor_density(self.layout, self.base.grid)

    @property
    def n_times(self) -> int:
        return len(self.data_times)

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(np.abs(self.theta0), 1.0)

    @property
    def reg_scale(self) -> np.ndarray:
        """Units of the Tikhonov distance: ``scale`` (relative) or ones (absolute)."""
        return self.scale if self.regularization == "relative" else np.ones(6)

    def forward_config(self, theta, schedule: tuple = ()) -> MacroConfig:
        eta, w_rep, w_adh, beta, w_rep_tum, _ = (float(v) for v in theta)
        kernels = replace(self.base.kernels, w_rep=w_rep, w_adh=w_adh, beta=beta, w_rep_tum=w_rep_tum)
        return replace(
            self.base,
            eta=eta,
            kernels=kernels,
            T=self.data_times[-1],
            snapshot_times=self.data_times,
            schedule=schedule,
        )

    def schedule(self) -> tuple:
        """Step plan shared by every evaluation, derived once from a pilot run at ``theta0``.

        A time grid that does not move with ``theta`` keeps the objective smooth
        enough for finite-difference gradients.
        """
        if not self.fixed_time_grid:
            return ()
        if self._schedule is None:
            try:
                pilot = _run(self.theta0, self, ())
                self._schedule = plan_schedule(pilot.lambda_trace, self.forward_config(self.theta0))
            except ForwardFailure as exc:
                logger.warning("pilot run at theta0 failed (%s); using adaptive steps", exc)
                self._schedule = ()
        return self._schedule

    def reference(self, theta) -> list:
        """Reference densities at ``data_times`` for bandwidth factor ``theta[5]``."""
        if self.trajectories is None:
            return [np.asarray(d, dtype=float) for d in self.densities]
        H = BandwidthMatrix(float(theta[5]), self.R_imm)
        return [kde(X, H, self.base.grid) for X in self.trajectories]


def forward_densities(theta, problem: EstimationProblem):
    """Run the macroscopic model at ``theta``; returns the snapshot series.

    Raises :class:`ForwardFailure` on invalid parameters, blow-up or numerical
    trouble.
    """
    return _run(np.asarray(theta, dtype=float), problem, problem.schedule())


def _run(theta, problem: EstimationProblem, schedule: tuple):
    try:
        cfg = problem.forward_config(theta, schedule)
        rho0 = kde(problem.initial_positions, BandwidthMatrix(float(theta[5]), problem.R_imm), cfg.grid)
        series = run_macro_twopop(cfg, problem.layout, zeta=problem.zeta, rho0=rho0)
    except (ValueError, NumericalFailure, BlowUp, LinearSolveError, FloatingPointError) as exc:
        raise ForwardFailure(str(exc)) from exc
    if series.blew_up:
        raise ForwardFailure(f"blow-up at t={series.diagnostics['blowup_time']:.6g}")
    return series


def residuals(theta, problem: EstimationProblem) -> np.ndarray:
    """Stacked relative residuals whose squared norm equals ``J(theta)``."""
    series = forward_densities(theta, problem)
    refs = problem.reference(theta)
    parts = []
    for rho, ref in zip(series.densities(), refs):
        norm = np.linalg.norm(ref)
        if norm == 0:
            raise ForwardFailure("reference density vanishes")
        parts.append(((rho - ref) / norm).ravel())
    r = np.concatenate(parts) / math.sqrt(problem.n_times)
    if not np.all(np.isfinite(r)):
        raise ForwardFailure("non-finite residual")
    return r


def objective_J(theta, problem: EstimationProblem) -> float:
    """Mean squared relative L2 misfit over the data times; ``penalty`` on failure."""
    try:
        r = residuals(theta, problem)
    except ForwardFailure as exc:
        logger.info("forward failure at theta=%s: %s", np.asarray(theta), exc)
        return problem.penalty
    return float(r @ r)


def regularization(theta, problem: EstimationProblem) -> float:
    """``lambda2 |(theta - theta0) / s|^2`` with ``s`` from :attr:`EstimationProblem.reg_scale`."""
    d = (np.asarray(theta, dtype=float) - problem.theta0) / problem.reg_scale
    return problem.lambda2 * float(d @ d)


def regularized_K(theta, problem: EstimationProblem) -> float:
    """``J(theta)`` plus the Tikhonov term of :func:`regularization`."""
    return objective_J(theta, problem) + regularization(theta, problem)


def relative_errors(theta, problem: EstimationProblem) -> list:
    """Per-snapshot relative L2 errors at ``theta``."""
    series = forward_densities(theta, problem)
    return [
        float(np.linalg.norm(rho - ref) / np.linalg.norm(ref))
        for rho, ref in zip(series.densities(), problem.reference(theta))
    ]


# --- trust region -------------------------------------------------------------


@dataclass
class CalibrationResult:
    theta_opt: np.ndarray
    E: float
    K: float
    iterations: int
    converged: bool
    message: str
    trace: list = field(default_factory=list)
    n_evaluations: int = 0
    residuals_per_snapshot: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "theta_opt": [float(v) for v in self.theta_opt],
            "E": float(self.E),
            "K": float(self.K),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "message": self.message,
            "trace": [dict(t) for t in self.trace],
            "n_evaluations": int(self.n_evaluations),
            "residuals_per_snapshot": [float(v) for v in self.residuals_per_snapshot],
        }


def _safe_residuals(theta, problem):
    try:
        return residuals(theta, problem)
    except ForwardFailure as exc:
        logger.info("forward failure at theta=%s: %s", theta, exc)
        return None


class _Evaluator:
    """Memoised residual evaluations, optionally fanned out to worker processes."""

    def __init__(self, problem: EstimationProblem, n_jobs: int = 1):
        self.problem = problem
        self.n_jobs = n_jobs
        self.cache: dict = {}

    def __call__(self, thetas: list) -> list:
        keys = [np.asarray(t, dtype=float).tobytes() for t in thetas]
        todo = [(k, t) for k, t in zip(keys, thetas) if k not in self.cache]
        # de-duplicate while preserving order
        todo = list({k: t for k, t in todo}.items())
        if todo:
            if self.n_jobs > 1 and len(todo) > 1:
                with ProcessPoolExecutor(max_workers=self.n_jobs) as pool:
                    values = list(pool.map(_safe_residuals, [t for _, t in todo], [self.problem] * len(todo)))
            else:
                values = [_safe_residuals(t, self.problem) for _, t in todo]
            for (k, _), v in zip(todo, values):
                self.cache[k] = v
        return [self.cache[k] for k in keys]

    @property
    def n_evaluations(self) -> int:
        return len(self.cache)


def _merit(r, theta, problem) -> float:
    if r is None:
        return problem.penalty + regularization(theta, problem)
    return float(r @ r) + regularization(theta, problem)


def _jacobian(z, r0, evaluate, problem, free, lo, hi):
    """Finite-difference Jacobian of the residuals in scaled coordinates."""
    scale = problem.scale
    h = problem.fd_step
    points, plan = [], []
    for i in free:
        up = z[i] + h <= hi[i]
        down = z[i] - h >= lo[i]
        zp, zm = z.copy(), z.copy()
        if up and down:
            zp[i] += h
            zm[i] -= h
            plan.append((i, "central"))
            points += [zp * scale, zm * scale]
        elif up:
            zp[i] += h
            plan.append((i, "forward"))
            points += [zp * scale]
        else:
            zm[i] -= h
            plan.append((i, "backward"))
            points += [zm * scale]
    values = evaluate(points)
    Jr = np.zeros((r0.size, z.size))
    pos = 0
    for i, kind in plan:
        if kind == "central":
            rp, rm = values[pos], values[pos + 1]
            pos += 2
            if rp is not None and rm is not None:
                Jr[:, i] = (rp - rm) / (2 * h)
            elif rp is not None:
                Jr[:, i] = (rp - r0) / h
            elif rm is not None:
                Jr[:, i] = (r0 - rm) / h
        else:
            rs = values[pos]
            pos += 1
            if rs is not None:
                Jr[:, i] = (rs - r0) / h if kind == "forward" else (r0 - rs) / h
    return Jr


def _solve_subproblem(g, H, lo, hi):
    """Minimise ``g.s + s.H.s/2`` over the box ``lo <= s <= hi``."""

    def model(s):
        return g @ s + 0.5 * s @ H @ s, g + H @ s

    # start from the projected steepest-descent (Cauchy-like) point
    gn = np.linalg.norm(g)
    starts = [np.zeros_like(g)]
    if gn > 0:
        width = np.max(hi - lo)
        starts.append(np.clip(-g / gn * width, lo, hi))
    best = None
    for s0 in starts:
        res = minimize(model, s0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"maxiter": 200, "ftol": 1e-15, "gtol": 1e-12})
        s = np.clip(res.x, lo, hi)
        val = model(s)[0]
        if best is None or val < best[1]:
            best = (s, val)
    return best


def estimate(problem: EstimationProblem, n_jobs: int = 1, delta0: float = 0.25,
             delta_max: float = 50.0) -> CalibrationResult:
    """Bound-constrained trust-region minimisation of :func:`regularized_K`.

    Works in scaled coordinates ``z = theta / max(|theta0|, 1)`` with an
    infinity-norm trust region. The model Hessian is the Gauss-Newton matrix of
    the finite-difference residual Jacobian plus a symmetric rank-one
    correction learnt from successive gradients.
    """
    scale = problem.scale
    lo = problem.lower / scale
    hi = problem.upper / scale
    z = np.clip(problem.theta0 / scale, lo, hi)
    free = [i for i in range(6) if hi[i] > lo[i]]
    fixed = np.ones(6, dtype=bool)
    fixed[free] = False
    evaluate = _Evaluator(problem, n_jobs=n_jobs)
    rs = problem.reg_scale
    lam2_z = 2.0 * problem.lambda2 * (scale / rs) ** 2

    def reg_grad(zz):
        return 2.0 * problem.lambda2 * scale * (zz * scale - problem.theta0) / rs**2

    r = evaluate([z * scale])[0]
    K = _merit(r, z * scale, problem)
    trace = [{"iteration": 0, "K": K, "J": K - regularization(z * scale, problem), "radius": delta0,
              "theta": [float(v) for v in z * scale]}]
    if r is None:
        return CalibrationResult(z * scale, problem.penalty, K, 0, False,
                                 "forward run fails at theta0", trace, evaluate.n_evaluations)

    delta = delta0
    A = np.zeros((6, 6))
    prev = None  # (z, g, s) of the last accepted step, for the curvature update
    message, converged = "iteration limit reached", False
    accepted_K = [K]
    it = 0
    Jr = None
    for it in range(1, problem.max_iter + 1):
        if Jr is None:
            Jr = _jacobian(z, r, evaluate, problem, free, lo, hi)
            GN = 2.0 * Jr.T @ Jr + np.diag(lam2_z)
            g = 2.0 * Jr.T @ r + reg_grad(z)
            g[fixed] = 0.0
            if prev is not None:
                z_old, g_old, s_old = prev
                y = g - g_old - GN @ s_old
                v = y - A @ s_old
                denom = v @ s_old
                if abs(denom) > 1e-8 * np.linalg.norm(v) * np.linalg.norm(s_old) and denom != 0:
                    A = A + 0.5 * np.outer(v, v) / denom  # damped SR1
            H = GN + A
            H[fixed, :] = 0.0
            H[:, fixed] = 0.0
        # projected gradient at the bounds
        pg = np.clip(z - g, lo, hi) - z
        if np.max(np.abs(pg)) <= 1e-12 * max(1.0, K):
            message, converged = "projected gradient vanishes", True
            break
        slo = np.maximum(lo - z, -delta)
        shi = np.minimum(hi - z, delta)
        slo[fixed] = shi[fixed] = 0.0
        s, pred = _solve_subproblem(g, H, slo, shi)
        predicted = -pred
        z_try = np.clip(z + s, lo, hi)
        r_try = evaluate([z_try * scale])[0]
        K_try = _merit(r_try, z_try * scale, problem)
        actual = K - K_try
        ratio = actual / predicted if predicted > 0 else -np.inf
        step_norm = float(np.max(np.abs(s))) if s.size else 0.0
        if ratio < 0.25:
            delta = 0.5 * (step_norm if step_norm > 0 else delta)
        elif ratio > 0.75 and step_norm >= 0.99 * delta:
            delta = min(2.0 * delta, delta_max)
        accepted = r_try is not None and actual > 0 and ratio > 1e-4
        if accepted:
            prev = (z.copy(), g.copy(), z_try - z)
            z, r, K = z_try, r_try, K_try
            accepted_K.append(K)
            Jr = None
        trace.append({
            "iteration": it, "K": K, "J": K - regularization(z * scale, problem), "radius": delta,
            "ratio": float(ratio) if np.isfinite(ratio) else None, "accepted": bool(accepted),
            "theta": [float(v) for v in z * scale],
        })
        logger.info("TR it %d: K=%.6e ratio=%s radius=%.3e", it, K, ratio, delta)
        if delta < 1e-8:
            message, converged = "trust radius below tolerance", True
            break
        if accepted and len(accepted_K) >= 4 and accepted_K[-4] - K < 1e-8:
            message, converged = "objective decrease below tolerance over 3 accepted steps", True
            break

    theta_opt = z * scale
    E = objective_J(theta_opt, problem)
    try:
        per = relative_errors(theta_opt, problem)
    except ForwardFailure:
        per = []
    return CalibrationResult(theta_opt, E, K, it, converged, message, trace, evaluate.n_evaluations, per)


# --- sensitivity ------------------------------------------------------------------


def max_final_density(theta, problem: EstimationProblem) -> float:
    series = forward_densities(theta, problem)
    return float(np.max(series.final_state.rho))


def sensitivity(theta_ref, problem: EstimationProblem, delta_frac: float = 0.05, output=max_final_density) -> list:
    """Relative sensitivity ``|Y(theta +- d e_i) - Y(theta)| / Y(theta) * theta_i / d``.

    Returns one record per component and sign; zero components are skipped
    with ``status="skipped"`` since the perturbation would vanish.
    """
    theta_ref = np.asarray(theta_ref, dtype=float)
    if delta_frac <= 0:
        raise ValueError("delta_frac must be > 0")
    Y0 = output(theta_ref, problem)
    rows = []
    for i, name in enumerate(THETA_NAMES):
        for sign in (+1, -1):
            row = {"parameter": name, "sign": "+" if sign > 0 else "-", "theta": float(theta_ref[i])}
            if theta_ref[i] == 0:
                row.update(status="skipped", S=None)
                rows.append(row)
                continue
            delta = delta_frac * theta_ref[i]
            theta = theta_ref.copy()
            theta[i] += sign * delta
            try:
                Y = output(theta, problem)
                row.update(status="ok", S=abs(Y - Y0) / Y0 * theta_ref[i] / delta, Y=Y)
            except ForwardFailure as exc:
                row.update(status=f"failed: {exc}", S=None)
            rows.append(row)
    return rows


def sensitivity_summary(rows: list) -> dict:
    """Largest of the two one-sided sensitivities per parameter (None when skipped)."""
    out: dict = {}
    for row in rows:
        S = row["S"]
        cur = out.get(row["parameter"])
        if S is not None:
            out[row["parameter"]] = S if cur is None else max(cur, S)
        else:
            out.setdefault(row["parameter"], None)
    return out


# --- estimator facade -----------------------------------------------------------


class MacroCalibrator(BaseEstimator):
    """Scikit-learn style wrapper around :func:`estimate`.

    ``fit`` takes agent positions at ``t = 0`` followed by the positions at
    each data time; ``predict`` returns the calibrated model densities.
    """

    def __init__(self, base=None, layout=None, theta0=(6.0, 500.0, 4.0, 2000.0, 0.0, 1.2),
                 lambda2=1e-6, bound_factor=50.0, max_iter=200, fd_step=1e-3, R_imm=0.02, n_jobs=1):
        self.base = base
        self.layout = layout
        self.theta0 = theta0
        self.lambda2 = lambda2
        self.bound_factor = bound_factor
        self.max_iter = max_iter
        self.fd_step = fd_step
        self.R_imm = R_imm
        self.n_jobs = n_jobs

    def _problem(self, positions, times) -> EstimationProblem:
        if len(positions) != len(times) + 1:
            raise ValueError("expected initial positions plus one array per data time")
        base = self.base if self.base is not None else default_calibration_config()
        return EstimationProblem(
            theta0=np.asarray(self.theta0, dtype=float), base=base,
            layout=self.layout if self.layout is not None else TumorLayout(),
            initial_positions=positions[0], data_times=tuple(times), trajectories=list(positions[1:]),
            lambda2=self.lambda2, bound_factor=self.bound_factor, max_iter=self.max_iter,
            fd_step=self.fd_step, R_imm=self.R_imm,
        )

    def fit(self, positions, times):
        self.problem_ = self._problem([np.asarray(p, dtype=float) for p in positions], times)
        self.result_ = estimate(self.problem_, n_jobs=self.n_jobs)
        self.theta_ = self.result_.theta_opt
        self.E_ = self.result_.E
        return self

    def predict(self, times=None) -> np.ndarray:
        """Model densities at the data times (or a subset of them)."""
        check_is_fitted(self, "theta_")
        series = forward_densities(self.theta_, self.problem_)
        dens = series.densities()
        if times is None:
            return dens
        index = {t: k for k, t in enumerate(series.times)}
        return np.stack([dens[index[float(t)]] for t in times])

    def score(self, positions, times) -> float:
        """Negative calibration error on (possibly new) trajectories."""
        check_is_fitted(self, "theta_")
        problem = self._problem([np.asarray(p, dtype=float) for p in positions], times)
        return -objective_J(self.theta_, problem)


def default_calibration_config(**overrides) -> MacroConfig:
    """Forward-model settings for agent-data calibration: the agent-model chemistry and damping."""
    from .micro import agent_chemo, agent_kernels

    kw = dict(
        kernels=agent_kernels(), chemo=agent_chemo(), alpha=100.0,
        interactions=("I1", "I2", "I3"), blowup_factor=CALIBRATION_BLOWUP_FACTOR,
    )
    kw.update(overrides)
    return MacroConfig(**kw)
