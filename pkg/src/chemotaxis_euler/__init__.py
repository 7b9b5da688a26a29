"""Nonlocal Euler-chemotaxis models, an agent-based generator and a calibration pipeline."""

__version__ = "0.1.0"

from .grid import ConservedState, Grid2D, total_mass  # noqa: E402
from .hyperbolic import PressureLaw  # noqa: E402
from .kde import BandwidthMatrix, DensityKDE, kde  # noqa: E402
from .kernels import KernelParams  # noqa: E402
from .models import MacroConfig, SnapshotSeries, TumorLayout, run_macro, run_macro_twopop  # noqa: E402
from .parabolic import ChemoParams  # noqa: E402
from .micro import AgentEnsemble, MicroConfig, run_micro  # noqa: E402
from .estimation import (  # noqa: E402
    CalibrationResult,
    EstimationProblem,
    MacroCalibrator,
    estimate,
    objective_J,
    regularized_K,
    sensitivity,
)

__all__ = [
    "AgentEnsemble", "BandwidthMatrix", "CalibrationResult", "ChemoParams", "ConservedState",
    "DensityKDE", "EstimationProblem", "Grid2D", "KernelParams", "MacroCalibrator", "MacroConfig",
    "MicroConfig", "PressureLaw", "SnapshotSeries", "TumorLayout", "estimate", "kde", "objective_J",
    "regularized_K", "run_macro", "run_macro_twopop", "run_micro", "sensitivity", "total_mass",
]
