"""Hybrid agent model: immune cells as second-order particles in a chemoattractant field
produced by fixed tumour cells. Used to generate synthetic trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Grid2D, bilinear_interpolate, gradient_neumann
from .kernels import KernelParams, gamma1, gamma2, gamma3
from .models import TumorLayout, tumor_point_source
from .parabolic import ChemoParams, theta_step


class AgentEscape(RuntimeError):
    """An agent left the domain even after wall reflection."""


def agent_kernels(**overrides) -> KernelParams:
    base = dict(beta=2000.0, varsigma=1.0, w_rep=500.0, w_adh=4.0, R_rep=0.04, R_adh=0.06,
                w_rep_tum=0.0, R_rep_tum=0.07, R_align=0.06)
    base.update(overrides)
    return KernelParams(**base)


def agent_chemo() -> ChemoParams:
    return ChemoParams(D=45.0, kappa=0.2, theta=0.5, source_mode="tumor")


@dataclass(frozen=True)
class MicroConfig:
    kernels: KernelParams = field(default_factory=agent_kernels)
    chemo: ChemoParams = field(default_factory=agent_chemo)
    layout: TumorLayout = field(default_factory=TumorLayout)
    eta: float = 6.0
    alpha: float = 100.0
    R_imm: float = 0.02
    n_agents: int = 80
    dt_micro: float = 1e-3
    T: float = 1.0
    seed: int = 0
    grid: Grid2D = field(default_factory=Grid2D)
    snapshot_times: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)

    def __post_init__(self):
        if self.dt_micro <= 0:
            raise ValueError(f"dt_micro must be > 0, got {self.dt_micro}")
        if self.n_agents < 1:
            raise ValueError(f"need at least one agent, got {self.n_agents}")
        if self.T <= 0:
            raise ValueError(f"T must be > 0, got {self.T}")
        if self.eta < 0 or self.alpha < 0:
            raise ValueError("eta and alpha must be >= 0")
        times = tuple(float(t) for t in self.snapshot_times)
        if any(t < 0 or t > self.T + 1e-12 for t in times):
            raise ValueError(f"snapshot_times must lie in [0, T={self.T}]")
        object.__setattr__(self, "snapshot_times", times)
        if not self.layout.inside(self.grid):
            raise ValueError("tumour centres must lie inside the domain")

    @property
    def xi(self) -> float:
        return self.layout.xi


@dataclass
class AgentEnsemble:
    X: np.ndarray
    V: np.ndarray
    tumors: np.ndarray
    R_imm: float = 0.02
    R_tum: float = 0.05

    def copy(self) -> "AgentEnsemble":
        return AgentEnsemble(self.X.copy(), self.V.copy(), self.tumors.copy(), self.R_imm, self.R_tum)


@dataclass
class MicroResult:
    times: list
    positions: list
    velocities: list
    phis: list
    tumors: np.ndarray


def interaction_forces(X, V, tumors, p: KernelParams) -> np.ndarray:
    """Cell-cell mean field ``(1/N) sum_j (gamma1 + gamma2)`` plus ``sum_j gamma3`` for all agents."""
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    N = len(X)
    dx = X[:, None, :] - X[None, :, :]  # x_i - x_j
    dv = V[None, :, :] - V[:, None, :]  # v_j - v_i
    F = (gamma1(dv, dx, p) + gamma2(dx, p)).sum(axis=1) / N
    if len(tumors) and p.w_rep_tum > 0:
        dy = X[:, None, :] - np.asarray(tumors)[None, :, :]
        F += gamma3(dy, p).sum(axis=1)
    return F


def micro_force(i: int, X, V, grad_phi_at_xi, cfg: MicroConfig, tumors=None) -> np.ndarray:
    """Total force on agent ``i``, damping ``-alpha v_i`` included."""
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    tumors = cfg.layout.array if tumors is None else np.asarray(tumors, dtype=float).reshape(-1, 2)
    p = cfg.kernels
    dx = X[i] - X
    dv = V - V[i]
    F = (gamma1(dv, dx, p) + gamma2(dx, p)).sum(axis=0) / len(X)
    if len(tumors) and p.w_rep_tum > 0:
        F = F + gamma3(X[i] - tumors, p).sum(axis=0)
    return F + cfg.eta * np.asarray(grad_phi_at_xi, dtype=float) - cfg.alpha * V[i]


def reflect_walls(X: np.ndarray, V: np.ndarray, L: float) -> None:
    """Mirror positions across the walls and flip the normal velocity, in place."""
    low = X < 0.0
    X[low] = -X[low]
    V[low] = -V[low]
    high = X > L
    X[high] = 2.0 * L - X[high]
    V[high] = -V[high]
    if np.any(X < 0.0) or np.any(X > L):
        raise AgentEscape("agent outside the domain after reflection; reduce dt_micro")


def micro_step(ens: AgentEnsemble, phi: np.ndarray, cfg: MicroConfig) -> AgentEnsemble:
    """Semi-implicit Euler: explicit interaction and chemotactic forces, implicit damping."""
    grid = cfg.grid
    dt = cfg.dt_micro
    grad = bilinear_interpolate(gradient_neumann(phi, grid), grid, ens.X).T
    F = interaction_forces(ens.X, ens.V, ens.tumors, cfg.kernels) + cfg.eta * grad
    V = (ens.V + dt * F) / (1.0 + cfg.alpha * dt)
    X = ens.X + dt * V
    reflect_walls(X, V, grid.L)
    return AgentEnsemble(X, V, ens.tumors, ens.R_imm, ens.R_tum)


def initial_ensemble(cfg: MicroConfig, rng=None) -> AgentEnsemble:
    """Agents uniform in the domain at rest; positions drawn from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    X = rng.uniform(0.0, cfg.grid.L, size=(cfg.n_agents, 2))
    return AgentEnsemble(X, np.zeros_like(X), cfg.layout.array, cfg.R_imm, cfg.layout.R_tum)


def run_micro(cfg: MicroConfig, ens: AgentEnsemble | None = None) -> MicroResult:
    """Co-evolve agents and chemoattractant, saving positions at ``cfg.snapshot_times``."""
    grid = cfg.grid
    ens = initial_ensemble(cfg) if ens is None else ens.copy()
    source = tumor_point_source(cfg.layout, grid) if len(ens.tumors) else grid.zeros()
    phi = source.copy()
    n_total = int(round(cfg.T / cfg.dt_micro))
    save_at = {int(round(t / cfg.dt_micro)): t for t in cfg.snapshot_times}
    result = MicroResult([], [], [], [], ens.tumors.copy())

    def record(n):
        result.times.append(save_at[n])
        result.positions.append(ens.X.copy())
        result.velocities.append(ens.V.copy())
        result.phis.append(phi.copy())

    if 0 in save_at:
        record(0)
    for n in range(1, n_total + 1):
        ens = micro_step(ens, phi, cfg)
        startup = n <= cfg.chemo.startup_steps
        phi = theta_step(phi, source, cfg.dt_micro, cfg.chemo, grid, theta=1.0 if startup else None)
        if n in save_at:
            record(n)
    return result
