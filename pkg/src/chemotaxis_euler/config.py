"""YAML run configuration: defaults per run kind, validation, canonical serialisation.

A configuration is a nested mapping with these sections (all optional)::

    kind: macro | macro2pop | micro | estimate
    seed: 0
    T: 1.0                      # final time (nondimensional)
    snapshot_times: [0.2, 0.4, 0.6, 0.8, 1.0]
    grid:     {L, nx, ny}
    pressure: {epsilon, rho0}
    kernels:  {beta, varsigma, w_rep, w_adh, R_rep, R_adh, w_rep_tum, R_rep_tum, R_align, align_cutoff}
    chemo:    {D, kappa, theta, source_mode, a, alpha1, alpha2}
    tumors:   {centers, R_tum, xi, h_tum}
    model:    macroscopic solver settings (eta, alpha, interactions, limiter, ...)
    micro:    agent model settings (eta, alpha, R_imm, n_agents, dt_micro)
    estimation: calibration settings (theta0, lambda2, bound_factor, ...)

Missing keys take the documented defaults of the run kind; unknown keys are
rejected. :func:`serialize` writes every value explicitly, so parsing the
output reproduces the configuration exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
import copy
import hashlib
from pathlib import Path
import re

import numpy as np
import yaml

from .grid import Grid2D
from .hyperbolic import PressureLaw
from .kernels import KernelParams
from .micro import MicroConfig, agent_chemo, agent_kernels
from .models import MacroConfig, TumorLayout
from .parabolic import ChemoParams

KINDS = ("macro", "macro2pop", "micro", "estimate")
DEFAULT_SNAPSHOTS = (0.2, 0.4, 0.6, 0.8, 1.0)
#: calibration start [eta, w_rep, w_adh, beta, w_rep_tum, h] without tumour repulsion
DEFAULT_THETA0 = (6.0, 500.0, 4.0, 2000.0, 0.0, 1.2)

MODEL_KEYS = (
    "eta", "alpha", "interactions", "n_bumps", "sigma", "limiter", "a_weight", "c_safe",
    "lam_min", "source_scheme", "blowup_factor", "max_clipped_fraction", "max_steps",
)
MICRO_KEYS = ("eta", "alpha", "R_imm", "n_agents", "dt_micro")


class ConfigError(ValueError):
    """Unreadable or invalid configuration."""


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-6``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)?(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


@dataclass(frozen=True)
class EstimationSettings:
    theta0: tuple = DEFAULT_THETA0
    lambda2: float = 1e-6
    bound_factor: float = 50.0
    max_iter: int = 200
    fd_step: float = 1e-3
    regularization: str = "relative"
    fixed_time_grid: bool = True
    R_imm: float = 0.02
    n_jobs: int = 1
    delta_frac: float = 0.05

    def __post_init__(self):
        theta0 = tuple(float(v) for v in self.theta0)
        if len(theta0) != 6 or any(v < 0 for v in theta0):
            raise ValueError("theta0 must have 6 non-negative components")
        object.__setattr__(self, "theta0", theta0)
        if self.lambda2 < 0 or self.bound_factor < 1 or self.max_iter < 1 or self.fd_step <= 0:
            raise ValueError("need lambda2 >= 0, bound_factor >= 1, max_iter >= 1, fd_step > 0")
        if self.regularization not in ("relative", "absolute"):
            raise ValueError(f"unknown regularization units {self.regularization!r}")
        if not 0 < self.delta_frac < 1:
            raise ValueError("delta_frac must lie in (0, 1)")


def _plain(obj) -> dict:
    """Dataclass fields as YAML-friendly builtins."""
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = _builtin(v)
    return out


def _builtin(v):
    if isinstance(v, (tuple, list)):
        return [_builtin(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def defaults(kind: str) -> dict:
    """Fully populated default mapping for ``kind``."""
    if kind not in KINDS:
        raise ConfigError(f"unknown kind {kind!r}; expected one of {KINDS}")
    macro = MacroConfig()
    two_pop = kind in ("macro2pop", "estimate")
    agent_settings = kind != "macro"
    kernels = agent_kernels() if agent_settings else KernelParams()
    chemo = agent_chemo() if agent_settings else ChemoParams()
    model = {k: _builtin(getattr(macro, k)) for k in MODEL_KEYS}
    if two_pop:
        model.update(eta=6.0, alpha=100.0, interactions=["I1", "I2", "I3"], blowup_factor=1e3)
    micro = MicroConfig()
    g = Grid2D()
    out = {
        "kind": kind,
        "seed": 0,
        "T": 1.0,
        "snapshot_times": list(DEFAULT_SNAPSHOTS),
        "grid": {"L": g.L, "nx": g.nx, "ny": g.ny},
        "pressure": _plain(PressureLaw()),
        "kernels": _plain(kernels),
        "chemo": _plain(chemo),
        "tumors": _plain(TumorLayout()),
        "model": model,
        "micro": {k: _builtin(getattr(micro, k)) for k in MICRO_KEYS},
        "estimation": _plain(EstimationSettings()),
    }
    return out


def _merge(base: dict, user: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in base:
            raise ConfigError(f"unknown key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a mapping")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully populated configuration (see module docstring)."""

    data: dict

    @property
    def kind(self) -> str:
        return self.data["kind"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def grid(self) -> Grid2D:
        return Grid2D(**self.data["grid"])

    def layout(self) -> TumorLayout:
        return TumorLayout(**self.data["tumors"])

    def macro_config(self) -> MacroConfig:
        d = self.data
        model = dict(d["model"])
        model["interactions"] = tuple(model["interactions"])
        return MacroConfig(
            grid=self.grid(), T=float(d["T"]), law=PressureLaw(**d["pressure"]),
            kernels=KernelParams(**d["kernels"]), chemo=ChemoParams(**d["chemo"]),
            seed=self.seed, snapshot_times=tuple(d["snapshot_times"]), **model,
        )

    def micro_config(self) -> MicroConfig:
        d = self.data
        snaps = tuple(d["snapshot_times"])
        if 0.0 not in snaps:
            snaps = (0.0,) + snaps
        return MicroConfig(
            kernels=KernelParams(**d["kernels"]), chemo=ChemoParams(**d["chemo"]), layout=self.layout(),
            T=float(d["T"]), seed=self.seed, grid=self.grid(), snapshot_times=snaps, **d["micro"],
        )

    def estimation(self) -> EstimationSettings:
        return EstimationSettings(**self.data["estimation"])

    def with_overrides(self, **changes) -> "RunConfig":
        """Apply dotted-key overrides, e.g. ``{"model.limiter": "upwind"}``; re-validates."""
        data = copy.deepcopy(self.data)
        for dotted, value in changes.items():
            node = data
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown key {dotted!r}")
            node[leaf] = value
        return validate(data)


def validate(data: dict) -> RunConfig:
    """Check every section by building the model objects; raises :class:`ConfigError`."""
    cfg = RunConfig(data)
    try:
        if not isinstance(data["seed"], int) or data["seed"] < 0:
            raise ValueError(f"seed must be a non-negative integer, got {data['seed']!r}")
        cfg.macro_config()
        cfg.micro_config()
        cfg.estimation()
        if not cfg.layout().inside(cfg.grid()):
            raise ValueError("tumour centres must lie inside the domain")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    try:
        user = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse {source}{where}: {getattr(exc, 'problem', exc)}") from exc
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    kind = user.get("kind", "macro")
    return validate(_merge(defaults(kind), user))


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def serialize(cfg: RunConfig) -> str:
    """Canonical YAML text (sorted keys, every value explicit)."""
    return yaml.safe_dump(cfg.data, sort_keys=True, default_flow_style=None)


def digest(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()
