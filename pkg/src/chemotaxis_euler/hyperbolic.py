"""Five-velocity discrete kinetic (BGK) relaxation scheme for the Euler part of the models.

Each step projects ``w = (rho, rho u1, rho u2)`` onto Maxwellians, transports the
five kinetic fields along their speeds ``lambda*(1,0), lambda*(0,1), lambda*(-1,0),
lambda*(0,-1), 0`` with an upwind or minmod flux-limited scheme, sums them back
and adds the momentum source.

Walls reflect: the ghost layers of a population moving towards a wall are the
mirror images (about the wall node) of its partner population, with the normal
momentum negated. For states whose normal momentum vanishes on the wall this is
exactly the even extension of the whole kinetic state, so transport conserves
the half-weighted mass to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np

from .grid import RHO_FLOOR, Grid2D, gradient_neumann, velocity

logger = logging.getLogger(__name__)

#: unit kinetic velocities; population i moves with lambda * VELOCITIES[i]
VELOCITIES = np.array([(1, 0), (0, 1), (-1, 0), (0, -1), (0, 0)])
CFL_NUMBER = 0.9
LIMITERS = ("upwind", "minmod")


class CFLViolation(ValueError):
    pass


class BlowUp(RuntimeError):
    """The density left the range the scheme can represent."""


@dataclass(frozen=True)
class PressureLaw:
    """``P(rho) = (rho - rho0)^3`` above the activation threshold, zero below.

    ``epsilon`` switches between the isentropic (1) and pressureless (0) models.
    """

    epsilon: int = 0
    rho0: float = 4.0

    def __post_init__(self):
        if self.epsilon not in (0, 1):
            raise ValueError(f"epsilon must be 0 or 1, got {self.epsilon}")

    def pressure(self, rho):
        excess = np.maximum(np.asarray(rho, dtype=float) - self.rho0, 0.0)
        return excess**3

    def dpressure(self, rho):
        excess = np.maximum(np.asarray(rho, dtype=float) - self.rho0, 0.0)
        return 3.0 * excess**2


@dataclass
class KineticEnsemble:
    """The five kinetic fields ``f[i]`` (shape ``(5, 3, nx, ny)``) with speed and weight."""

    f: np.ndarray
    lam: float
    a_weight: float = 0.2

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"kinetic speed must be positive, got {self.lam}")
        if not 0 < self.a_weight < 0.25:
            raise ValueError(f"Maxwellian weight must lie in (0, 1/4), got {self.a_weight}")

    def moments(self) -> np.ndarray:
        return self.f.sum(axis=0)


def flux_A(w: np.ndarray, law: PressureLaw) -> tuple[np.ndarray, np.ndarray]:
    """Physical fluxes ``A1(w), A2(w)`` for stacked states of shape ``(3, ...)``."""
    w = np.asarray(w, dtype=float)
    rho, m1, m2 = w
    u1, u2 = velocity(w)
    p = law.epsilon * law.pressure(rho)
    A1 = np.stack([m1, m1 * u1 + p, m1 * u2])
    A2 = np.stack([m2, m2 * u1, m2 * u2 + p])
    return A1, A2


def maxwellians(w: np.ndarray, law: PressureLaw, lam: float, a: float = 0.2) -> np.ndarray:
    """Kinetic equilibria ``M_i = a_i w + b_i1 A1 + b_i2 A2``, shape ``(5, 3, ...)``."""
    w = np.asarray(w, dtype=float)
    A1, A2 = flux_A(w, law)
    c = 0.5 / lam
    aw = a * w
    return np.stack([aw + c * A1, aw + c * A2, aw - c * A1, aw - c * A2, (1.0 - 4.0 * a) * w])


def cfl_dt(lam: float, dx: float) -> float:
    return CFL_NUMBER * dx / lam


def minmod_phi(r):
    """Minmod limiter ``max(0, min(r, 1))``; NaN (from 0/0) maps to 0, +inf to 1."""
    r = np.asarray(r, dtype=float)
    out = np.maximum(0.0, np.minimum(r, 1.0))
    return np.where(np.isnan(r), 0.0, out)


def select_lambda(
    w: np.ndarray, law: PressureLaw, c_safe: float = 1.2, lam_min: float = 1.0, a: float | None = 0.2
) -> float:
    """Kinetic speed satisfying the sub-characteristic condition with a safety factor.

    When the Maxwellian weight ``a`` is given, ``lambda`` is also kept above
    ``max|u_i| / (2a)`` so that the density components of all Maxwellians stay
    non-negative.
    """
    u = velocity(w)
    speed = np.abs(u[0]) + np.abs(u[1])
    if law.epsilon:
        speed = speed + np.sqrt(np.maximum(law.dpressure(w[0]), 0.0))
    lam = c_safe * float(np.max(speed))
    if a is not None:
        lam = max(lam, float(np.max(np.abs(u))) / (2.0 * a) * (1.0 + 1e-12))
    if not np.isfinite(lam):
        raise BlowUp("kinetic speed is not finite")
    return max(lam, lam_min)


# --- transport ------------------------------------------------------------


def _advect_positive(e: np.ndarray, nu: float, limited: bool) -> np.ndarray:
    """One step of speed ``nu`` > 0 (CFL units) along axis 0 of an array with 2 ghost layers
    on the upwind side and 1 on the downwind side. Returns the interior."""
    d = np.diff(e, axis=0)  # d[k] = e[k+1] - e[k]
    interior = e[2:-1]
    upwind_diff = d[1:-1]  # e[k] - e[k-1] for interior k
    if not limited:
        return interior - nu * upwind_diff
    # limited slope at node k: minmod(d[k-1], d[k]) == phi(d[k-1]/d[k]) * d[k]
    same = d[:-1] * d[1:] > 0
    slope = np.where(same, np.sign(d[1:]) * np.minimum(np.abs(d[:-1]), np.abs(d[1:])), 0.0)
    corr = 0.5 * (1.0 - nu) * slope  # F_{k+1/2} - e_k
    return interior - nu * (upwind_diff + corr[1:] - corr[:-1])


def _reflect(f: np.ndarray, axis: int) -> np.ndarray:
    # f has shape (3, ..); negate the momentum normal to the wall
    out = f.copy()
    out[1 + axis] *= -1.0
    return out


def _extend(f_mover: np.ndarray, f_partner: np.ndarray, axis: int, forward: bool) -> np.ndarray:
    """Ghost-extend ``f_mover`` (shape (3, nx, ny)) along spatial ``axis``; 2 ghosts upwind, 1 downwind."""
    ax = axis + 1
    refl = _reflect(f_partner, axis)
    n = f_mover.shape[ax]
    take = lambda arr, idx: np.take(arr, idx, axis=ax)  # noqa: E731
    if forward:
        # moving towards +axis: upwind side is the low wall
        return np.concatenate([take(refl, [2, 1]), f_mover, take(refl, [n - 2])], axis=ax)
    return np.concatenate([take(refl, [1]), f_mover, take(refl, [n - 2, n - 3])], axis=ax)


def _advect_axis(f_mover, f_partner, nu, axis, forward, limited):
    e = _extend(f_mover, f_partner, axis, forward)
    ax = axis + 1
    if not forward:
        e = np.flip(e, axis=ax)
    e = np.moveaxis(e, ax, 0)
    out = np.moveaxis(_advect_positive(e, nu, limited), 0, ax)
    if not forward:
        out = np.flip(out, axis=ax)
    return out


def transport_step(ens: KineticEnsemble, dt: float, grid: Grid2D, limiter: str = "minmod") -> KineticEnsemble:
    """Advect every population along its kinetic velocity for one step ``dt``."""
    if limiter not in LIMITERS:
        raise ValueError(f"limiter must be one of {LIMITERS}, got {limiter!r}")
    h = min(grid.dx, grid.dy)
    dt_max = cfl_dt(ens.lam, h)
    if dt > dt_max * (1 + 1e-12):
        raise CFLViolation(f"dt={dt} exceeds CFL bound {dt_max} for lambda={ens.lam}")
    if grid.nx < 4 or grid.ny < 4:
        raise ValueError("transport needs at least 4 nodes per axis")
    limited = limiter == "minmod"
    f = ens.f
    nux = ens.lam * dt / grid.dx
    nuy = ens.lam * dt / grid.dy
    new = np.empty_like(f)
    new[0] = _advect_axis(f[0], f[2], nux, 0, True, limited)
    new[2] = _advect_axis(f[2], f[0], nux, 0, False, limited)
    new[1] = _advect_axis(f[1], f[3], nuy, 1, True, limited)
    new[3] = _advect_axis(f[3], f[1], nuy, 1, False, limited)
    new[4] = f[4]
    return KineticEnsemble(new, ens.lam, ens.a_weight)


# --- source and full step -------------------------------------------------


def source_eval(w, phi, I, eta: float, alpha: float, epsilon: int, grid: Grid2D) -> np.ndarray:
    """Explicit momentum source ``F(w)``; the caller multiplies by ``dt``."""
    w = np.asarray(w, dtype=float)
    rho = w[0]
    u = velocity(w)
    grad_phi = gradient_neumann(phi, grid)
    F = np.zeros_like(w)
    F[1:] = (1 - epsilon) * rho * np.asarray(I) + eta * rho * grad_phi - alpha * rho * u
    return F


@dataclass
class StepDiagnostics:
    clipped_mass: float = 0.0
    lam_history: list = field(default_factory=list)


def enforce_walls(w: np.ndarray) -> np.ndarray:
    """Zero the normal momentum on the walls (``u . n = 0``)."""
    w[1, 0, :] = 0.0
    w[1, -1, :] = 0.0
    w[2, :, 0] = 0.0
    w[2, :, -1] = 0.0
    return w


def hyperbolic_step(
    w: np.ndarray,
    phi: np.ndarray,
    I: np.ndarray,
    law: PressureLaw,
    dt: float,
    grid: Grid2D,
    *,
    eta: float = 0.0,
    alpha: float = 0.0,
    lam: float | None = None,
    a: float = 0.2,
    limiter: str = "minmod",
    relax_rate: np.ndarray | None = None,
    diagnostics: StepDiagnostics | None = None,
) -> np.ndarray:
    """Advance ``w`` by one relaxation step and the momentum source.

    With ``relax_rate=None`` the source is fully explicit, ``w^{n+1} = sum_i f_i^{n+1/2}
    + dt F(w^n)``. When a non-negative field ``c`` is given, ``I`` is read as the
    non-stiff part of the interaction, the total being ``I - c u``; the terms
    proportional to ``u`` (``-c rho u`` and the damping ``-alpha rho u``) are then
    taken implicitly at the new time level, which stays stable for large
    alignment strengths and damping coefficients.
    """
    w = np.asarray(w, dtype=float)
    if lam is None:
        lam = select_lambda(w, law, a=a)
    ens = KineticEnsemble(maxwellians(w, law, lam, a), lam, a)
    w_new = transport_step(ens, dt, grid, limiter).moments()

    if relax_rate is None:
        w_new += dt * source_eval(w, phi, I, eta, alpha, law.epsilon, grid)
    else:
        rho = w[0]
        grad_phi = gradient_neumann(phi, grid)
        forcing = (1 - law.epsilon) * rho * np.asarray(I) + eta * rho * grad_phi
        rate = alpha + (1 - law.epsilon) * np.asarray(relax_rate)
        w_new[1:] = (w_new[1:] + dt * forcing) / (1.0 + dt * rate)

    negative = w_new[0] < 0
    if np.any(negative):
        lost = -float(np.sum(w_new[0][negative] * grid.weights()[negative]))
        w_new[0][negative] = 0.0
        w_new[1:, negative] = 0.0
        if diagnostics is not None:
            diagnostics.clipped_mass += lost
        logger.debug("clipped %.3e of negative density", lost)
    enforce_walls(w_new)
    if not np.all(np.isfinite(w_new)):
        raise BlowUp("non-finite values after hyperbolic step")
    return w_new


__all__ = [
    "BlowUp",
    "CFLViolation",
    "KineticEnsemble",
    "PressureLaw",
    "RHO_FLOOR",
    "VELOCITIES",
    "cfl_dt",
    "enforce_walls",
    "flux_A",
    "hyperbolic_step",
    "maxwellians",
    "minmod_phi",
    "select_lambda",
    "source_eval",
    "transport_step",
]
