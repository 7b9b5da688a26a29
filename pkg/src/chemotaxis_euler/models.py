"""Time-stepped macroscopic models: single population (pressureless or isentropic) and
immune cells moving among fixed tumour cells."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np

from .grid import ConservedState, Grid2D, total_mass
from .hyperbolic import (
    CFL_NUMBER,
    BlowUp,
    PressureLaw,
    StepDiagnostics,
    cfl_dt,
    hyperbolic_step,
    select_lambda,
)
from .kde import BandwidthMatrix, kde
from .kernels import GridConvolution, KernelParams, nonlocal_operator, offset_mesh
from .parabolic import ChemoParams, g_production, theta_step

logger = logging.getLogger(__name__)

INTERACTIONS = ("I1", "I2", "I3")
#: default positions of the three fixed tumour cells
DEFAULT_TUMOR_CENTERS = ((0.5, 0.7), (0.3, 0.3), (0.8, 0.5))


class NumericalFailure(RuntimeError):
    """The run produced NaNs or lost too much mass to positivity clipping."""


@dataclass(frozen=True)
class MacroConfig:
    grid: Grid2D = field(default_factory=Grid2D)
    T: float = 1.0
    law: PressureLaw = field(default_factory=PressureLaw)
    kernels: KernelParams = field(default_factory=KernelParams)
    chemo: ChemoParams = field(default_factory=ChemoParams)
    eta: float = 0.5
    alpha: float = 0.0
    interactions: tuple = ("I1", "I2")
    seed: int = 0
    snapshot_times: tuple = ()
    n_bumps: int = 200
    sigma: float = 0.015
    limiter: str = "minmod"
    a_weight: float = 0.2
    c_safe: float = 1.2
    lam_min: float = 1.0
    source_scheme: str = "point-implicit"
    blowup_factor: float = 2.0
    max_clipped_fraction: float = 1e-6
    max_steps: int = 1_000_000
    schedule: tuple = ()

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError(f"T must be > 0, got {self.T}")
        if self.eta < 0 or self.alpha < 0:
            raise ValueError("eta and alpha must be >= 0")
        object.__setattr__(self, "interactions", tuple(self.interactions))
        unknown = set(self.interactions) - set(INTERACTIONS)
        if unknown:
            raise ValueError(f"unknown interaction terms {sorted(unknown)}")
        times = tuple(float(t) for t in self.snapshot_times)
        if any(t < 0 or t > self.T for t in times):
            raise ValueError(f"snapshot_times must lie in [0, T={self.T}], got {times}")
        object.__setattr__(self, "snapshot_times", times)
        if self.source_scheme not in ("explicit", "point-implicit"):
            raise ValueError(f"unknown source_scheme {self.source_scheme!r}")
        if self.n_bumps < 1 or self.sigma <= 0:
            raise ValueError("need n_bumps >= 1 and sigma > 0")
        if self.blowup_factor <= 1:
            raise ValueError(f"blowup_factor must exceed 1, got {self.blowup_factor}")
        if self.schedule:
            blocks = tuple((float(t), int(n)) for t, n in self.schedule)
            ends = [t for t, _ in blocks]
            if any(n < 1 for _, n in blocks) or ends != sorted(set(ends)) or ends[0] <= 0:
                raise ValueError("schedule blocks need increasing end times and >= 1 step each")
            if abs(ends[-1] - self.T) > 1e-12 * max(1.0, self.T):
                raise ValueError(f"schedule must end at T={self.T}, ends at {ends[-1]}")
            missing = [t for t in times if t > 0 and not any(abs(t - e) <= 1e-12 for e in ends)]
            if missing:
                raise ValueError(f"snapshot times {missing} are not schedule block ends")
            object.__setattr__(self, "schedule", blocks)


@dataclass(frozen=True)
class TumorLayout:
    centers: tuple = DEFAULT_TUMOR_CENTERS
    R_tum: float = 0.05
    xi: float = 1000.0
    h_tum: float = 1.2

    def __post_init__(self):
        centers = tuple(tuple(float(c) for c in y) for y in self.centers)
        object.__setattr__(self, "centers", centers)
        if self.R_tum <= 0:
            raise ValueError(f"R_tum must be > 0, got {self.R_tum}")
        if self.h_tum <= 0:
            raise ValueError(f"h_tum must be > 0, got {self.h_tum}")

    def inside(self, grid: Grid2D) -> bool:
        return all(0 <= c <= grid.L for y in self.centers for c in y)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.centers, dtype=float).reshape(-1, 2)


@dataclass
class SnapshotSeries:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    phis: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def blew_up(self) -> bool:
        return self.diagnostics.get("blowup_time") is not None

    def densities(self) -> np.ndarray:
        return np.stack([s.rho for s in self.states])


# --- initial and source data ----------------------------------------------


def init_density_bumps(N: int, sigma: float, seed, grid: Grid2D, rng=None) -> np.ndarray:
    """Sum of ``N`` Gaussian bumps at uniform random centres, normalised to unit mass."""
    if N < 1 or sigma <= 0:
        raise ValueError("need N >= 1 and sigma > 0")
    rng = np.random.default_rng(seed) if rng is None else rng
    centers = rng.uniform(0.0, grid.L, size=(N, 2))
    X, Y = grid.mesh()
    bumps = np.zeros(grid.shape)
    for cx, cy in centers:
        bumps += np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2.0 * sigma**2))
    bumps /= 2.0 * np.pi * sigma**2
    tau = 1.0 / total_mass(bumps, grid)
    return tau * bumps


def chi_source(z, layout: TumorLayout):
    """Smoothed indicator of a tumour disc: ``xi (1 - (|z|/R)^2)^2`` inside, zero outside."""
    z = np.asarray(z, dtype=float)
    r2 = (z[..., 0] ** 2 + z[..., 1] ** 2) / layout.R_tum**2
    return np.where(r2 < 1.0, layout.xi * (1.0 - r2) ** 2, 0.0)


def tumor_density(layout: TumorLayout, grid: Grid2D) -> np.ndarray:
    """Number density of tumour cells: ``M`` times their KDE (bandwidth ``h_tum R_tum``)."""
    centers = layout.array
    return len(centers) * kde(centers, BandwidthMatrix(layout.h_tum, layout.R_tum), grid)


def tumor_chemo_source(zeta: np.ndarray, layout: TumorLayout, grid: Grid2D) -> np.ndarray:
    """Discrete convolution ``chi * zeta`` on the grid."""
    return GridConvolution(grid, chi_source(offset_mesh(grid), layout))(zeta)


def tumor_point_source(layout: TumorLayout, grid: Grid2D) -> np.ndarray:
    """``sum_j chi(x - y_j)`` sampled at the nodes."""
    X, Y = grid.mesh()
    nodes = np.stack([X, Y], axis=-1)
    return sum(chi_source(nodes - np.asarray(y), layout) for y in layout.centers)


# --- time loop --------------------------------------------------------------


def _interaction_terms(op, w, cfg: MacroConfig, I3):
    """Non-stiff interaction field and the local alignment rate (or None)."""
    rho, m = w[0], w[1:]
    I = np.zeros_like(m)
    rate = None
    use_align = "I1" in cfg.interactions and cfg.kernels.beta > 0
    use_attr = "I2" in cfg.interactions and (cfg.kernels.w_rep > 0 or cfg.kernels.w_adh > 0)
    if use_align or use_attr:
        hat = op._align.transform(np.concatenate([rho[None], m]))
        if use_align:
            conv = op._align.apply_hat(hat)
            if cfg.source_scheme == "explicit":
                u = m / np.maximum(rho, 1e-10)
                I += conv[1:] - u * conv[0]
            else:
                I += conv[1:]
                rate = conv[0]
        if use_attr:
            I += op._attr.apply_hat(hat[0])
    if I3 is not None:
        I += I3
    return I, rate


def _integrate(cfg: MacroConfig, rho0, phi0, chemo_source=None, I3=None, m0=None) -> SnapshotSeries:
    grid = cfg.grid
    law = cfg.law
    op = nonlocal_operator(grid, cfg.kernels)
    h = min(grid.dx, grid.dy)
    w = np.zeros((3, *grid.shape))
    w[0] = grid.check(rho0)
    if m0 is not None:
        w[1:] = m0
    phi = np.array(grid.check(phi0), dtype=float)
    mass0 = total_mass(w[0], grid)
    rho_max0 = float(np.max(w[0]))
    threshold = cfg.blowup_factor * rho_max0

    series = SnapshotSeries()
    targets = sorted(set(t for t in cfg.snapshot_times if t > 0) | {cfg.T})
    if 0.0 in cfg.snapshot_times:
        series.times.append(0.0)
        series.states.append(ConservedState.from_array(w))
        series.phis.append(phi.copy())

    diag = StepDiagnostics()
    lams: list = []
    step_times: list = []
    state = {"t": 0.0, "w": w, "phi": phi, "n": 0, "max_rho": rho_max0, "substeps": 0}

    def advance(dt, lam):
        """One splitting step; returns False on a blow-up signal."""
        w = state["w"]
        I, rate = _interaction_terms(op, w, cfg, I3)
        s = chemo_source if chemo_source is not None else g_production(w[0], cfg.chemo)
        try:
            state["w"] = hyperbolic_step(
                w, state["phi"], I, law, dt, grid,
                eta=cfg.eta, alpha=cfg.alpha, lam=lam, a=cfg.a_weight,
                limiter=cfg.limiter, relax_rate=rate, diagnostics=diag,
            )
        except BlowUp as exc:
            logger.info("blow-up at t=%.6g: %s", state["t"] + dt, exc)
            return False
        startup = state["n"] < cfg.chemo.startup_steps
        state["phi"] = theta_step(state["phi"], s, dt, cfg.chemo, grid, theta=1.0 if startup else None)
        state["n"] += 1
        lams.append(lam)
        if not np.all(np.isfinite(state["phi"])):
            raise NumericalFailure(f"non-finite chemoattractant at t={state['t'] + dt:.6g}")
        if diag.clipped_mass > cfg.max_clipped_fraction * mass0:
            raise NumericalFailure(
                f"clipped {diag.clipped_mass:.3e} of negative density (total {mass0:.3e}) "
                f"by t={state['t'] + dt:.6g}"
            )
        state["max_rho"] = max(state["max_rho"], float(np.max(state["w"][0])))
        if state["n"] >= cfg.max_steps:
            raise NumericalFailure(f"step limit {cfg.max_steps} reached at t={state['t'] + dt:.6g}")
        return True

    def scheduled_step(t_next):
        """Fixed-length step, split into equal pieces only if the state demands a larger speed."""
        t0 = state["t"]
        dt = t_next - t0
        need = select_lambda(state["w"], law, cfg.c_safe, cfg.lam_min, cfg.a_weight)
        pieces = max(1, math.ceil(need * dt / (CFL_NUMBER * h) - 1e-12))
        state["substeps"] += pieces - 1
        sub = dt / pieces
        for q in range(1, pieces + 1):
            if not advance(sub, CFL_NUMBER * h / sub):
                return False
            state["t"] = t_next if q == pieces else t0 + q * sub
        return True

    def adaptive_steps():
        for target in targets:
            while True:
                lam = select_lambda(state["w"], law, cfg.c_safe, cfg.lam_min, cfg.a_weight)
                dt = cfl_dt(lam, h)
                hit = state["t"] + dt >= target - 1e-12 * max(1.0, target)
                if hit:
                    dt = target - state["t"]
                if not advance(dt, lam):
                    return state["t"] + dt
                state["t"] = target if hit else state["t"] + dt
                step_times.append(state["t"])
                yield target if hit else None
                if hit:
                    break

    def scheduled_steps():
        t_start = 0.0
        for t_end, n in cfg.schedule:
            for q in range(1, n + 1):
                t_next = t_end if q == n else t_start + (t_end - t_start) * q / n
                if not scheduled_step(t_next):
                    return state["t"]
                step_times.append(state["t"])
                yield t_end if q == n else None
            t_start = t_end

    blowup_time = None
    stepper = scheduled_steps() if cfg.schedule else adaptive_steps()
    while True:
        try:
            reached = next(stepper)
        except StopIteration as stop:
            blowup_time = stop.value
            break
        w = state["w"]
        if reached is not None and any(abs(reached - t) <= 1e-12 for t in cfg.snapshot_times if t > 0):
            series.times.append(state["t"])
            series.states.append(ConservedState.from_array(w))
            series.phis.append(state["phi"].copy())
        if np.max(w[0]) >= threshold:
            blowup_time = state["t"]
            logger.info("blow-up detected at t=%.6g (max rho %.4g)", state["t"], np.max(w[0]))
            break
    t = state["t"]
    w = state["w"]
    phi = state["phi"]
    n_steps = state["n"]
    max_rho = state["max_rho"]
    series.lambda_trace = (np.array(step_times), np.array(lams))

    series.diagnostics = {
        "blowup_time": blowup_time,
        "final_time": t,
        "n_steps": n_steps,
        "clipped_mass": diag.clipped_mass,
        "initial_mass": mass0,
        "final_mass": total_mass(w[0], grid),
        "max_rho": max_rho,
        "initial_max_rho": rho_max0,
        "blowup_threshold": threshold,
        "lambda_min": min(lams) if lams else math.nan,
        "lambda_max": max(lams) if lams else math.nan,
        "lambda_mean": float(np.mean(lams)) if lams else math.nan,
        "substeps": state["substeps"],
    }
    series.final_state = ConservedState.from_array(w)
    series.final_phi = phi
    return series


def plan_schedule(lambda_trace, cfg: MacroConfig, headroom: float = 1.2, block: float = 0.05) -> tuple:
    """Fixed step plan from the kinetic speeds of a pilot run.

    The interval ``[0, T]`` is cut into blocks of length about ``block`` whose
    ends include every snapshot time. Each block gets equal steps sized for
    ``headroom`` times the largest speed the pilot used inside it.
    """
    times, lams = (np.asarray(a, dtype=float) for a in lambda_trace)
    if times.size == 0:
        raise ValueError("pilot run recorded no steps")
    h = min(cfg.grid.dx, cfg.grid.dy)
    n_blocks = max(1, int(round(cfg.T / block)))
    snaps = [t for t in cfg.snapshot_times if t > 0]
    grid_ends = [t for t in np.linspace(0.0, cfg.T, n_blocks + 1)[1:-1]
                 if all(abs(t - s) > 1e-9 * max(1.0, cfg.T) for s in snaps)]
    ends = sorted(set(grid_ends) | set(snaps) | {cfg.T})
    # step k covers (times[k-1], times[k]] with speed lams[k]
    starts = np.concatenate([[0.0], times[:-1]])
    plan = []
    t_start = 0.0
    for t_end in ends:
        inside = (times > t_start) & (starts < t_end)
        lam = max(float(lams[inside].max()) if inside.any() else float(lams[-1]), cfg.lam_min)
        n = max(1, math.ceil(headroom * lam * (t_end - t_start) / (CFL_NUMBER * h)))
        plan.append((t_end, n))
        t_start = t_end
    return tuple(plan)


def run_macro(cfg: MacroConfig, rho0=None, phi0=None, m0=None) -> SnapshotSeries:
    """Single-population model with the production law ``g`` of ``cfg.chemo``.

    Initial density defaults to the Gaussian-bump field drawn from ``cfg.seed``;
    velocity and chemoattractant start at zero. ``I3`` is ignored here.
    """
    grid = cfg.grid
    if rho0 is None:
        rho0 = init_density_bumps(cfg.n_bumps, cfg.sigma, cfg.seed, grid)
    if phi0 is None:
        phi0 = grid.zeros()
    single = replace(cfg, interactions=tuple(i for i in cfg.interactions if i != "I3"))
    if cfg.chemo.source_mode == "tumor":
        return _integrate(single, rho0, phi0, chemo_source=grid.zeros(), m0=m0)
    return _integrate(single, rho0, phi0, m0=m0)


def run_macro_twopop(
    cfg: MacroConfig, layout: TumorLayout, zeta=None, rho0=None, phi0=None
) -> SnapshotSeries:
    """Immune density moving among a fixed tumour density ``zeta``.

    The chemoattractant source is ``chi * zeta`` (computed once) and, unless
    given, the initial chemoattractant equals that source.
    """
    grid = cfg.grid
    if zeta is None:
        zeta = tumor_density(layout, grid)
    zeta = grid.check(zeta)
    if np.any(zeta < 0):
        raise ValueError("tumour density must be non-negative")
    if rho0 is None:
        rho0 = init_density_bumps(cfg.n_bumps, cfg.sigma, cfg.seed, grid)
    source = tumor_chemo_source(zeta, layout, grid)
    if phi0 is None:
        phi0 = source.copy()
    I3 = None
    if "I3" in cfg.interactions and cfg.kernels.w_rep_tum > 0:
        I3 = nonlocal_operator(grid, cfg.kernels).tumor(zeta)
    return _integrate(cfg, rho0, phi0, chemo_source=source, I3=I3)
