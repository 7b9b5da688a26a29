"""Shared set-ups for the cross-scale calibration checks.

Each case runs the agent model with its own interaction strengths, then
calibrates the macroscopic model on the resulting trajectories.
"""

from __future__ import annotations

import numpy as np

from chemotaxis_euler.estimation import EstimationProblem, default_calibration_config, estimate
from chemotaxis_euler.micro import MicroConfig, run_micro, agent_kernels
from chemotaxis_euler.models import TumorLayout

#: starting points [eta, w_rep, w_adh, beta, w_rep_tum, h] per case
CASES = {
    "alignment": (6.0, 500.0, 4.0, 2000.0, 0.0, 1.2),
    "no_alignment": (6.0, 500.0, 4.0, 0.0, 0.0, 1.2),
    "tumor_repulsion": (6.0, 500.0, 4.0, 2000.0, 850.0, 1.2),
}


def synthetic_problem(case: str, seed: int, **problem_kw) -> EstimationProblem:
    theta0 = np.array(CASES[case])
    eta, w_rep, w_adh, beta, w_rep_tum, _ = theta0
    layout = TumorLayout()
    mcfg = MicroConfig(
        kernels=agent_kernels(w_rep=w_rep, w_adh=w_adh, beta=beta, w_rep_tum=w_rep_tum),
        layout=layout, eta=eta, seed=seed,
    )
    micro = run_micro(mcfg)
    return EstimationProblem(
        theta0=theta0, base=default_calibration_config(), layout=layout,
        initial_positions=micro.positions[0], data_times=tuple(micro.times[1:]),
        trajectories=list(micro.positions[1:]), **problem_kw,
    )


def calibrate(case: str, seed: int, **problem_kw):
    problem = synthetic_problem(case, seed, **problem_kw)
    return problem, estimate(problem)
