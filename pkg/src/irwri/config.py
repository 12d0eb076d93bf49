"""Experiment configuration as sectioned ``key = value`` text.

Every section maps to one dataclass below.  Parsing rejects unknown sections
and keys; values missing from the file keep their defaults.  Tuples are
written space separated, booleans as ``true``/``false``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class GridSpec:
    nx: int = 64  # interior cells
    nz: int = 64
    spacing: float = 0.02  # km
    pml_width: int = 10
    free_surface: bool = False


@dataclass
class ModelSpec:
    kind: str = "inclusion"  # inclusion | layered
    background_v0: float = 3.0
    background_eps: float = 0.05
    background_delta: float = 0.05
    anomaly_v0: float = 3.3
    anomaly_eps: float = 0.1
    anomaly_delta: float = 0.2
    anomaly_classes: tuple = ("v0", "eps", "delta")
    radius: float = 0.1  # km
    init_v0_top: float = 1.5  # layered starting model: linear v0 between these
    init_v0_bottom: float = 3.2
    smoothing: float = 0.15  # km, Gaussian width for the smoothed eps/delta


@dataclass
class AcquisitionSpec:
    kind: str = "surrounding"  # surrounding | surface
    n_sources: int = 64
    n_receivers: int = 0  # 0 places one receiver on every perimeter node
    inset: int = 2
    source_spacing: float = 0.2
    receiver_spacing: float = 0.05
    source_depth: float = 0.075
    receiver_depth: float = 0.025


@dataclass
class ScheduleSpec:
    frequencies: tuple = (4.8, 6.6375, 8.475, 10.3125, 12.15, 13.9875, 15.825, 17.6625, 19.5)
    paths: tuple = ()  # flattened (start, stop) pairs; empty runs one joint batch
    spacing: float = 0.5
    batch_size: int = 2
    overlap: int = 1


@dataclass
class InversionSpec:
    active: tuple = ("v0", "eps", "delta")
    regularization: str = "dmp+tv"
    k_max: int = 25
    eps_b: float = 1e-3
    eps_d: float = 1e-5
    lam_fraction: float = 0.0  # 0 picks the noiseless / noisy default
    lam1_percent: float = 0.1
    lam1_growth: float = 1.0
    tv_percent: float = 0.02
    damping_ratio: float = 1.0
    tv_ratio: float = 1.0
    eps_prior_factor: float = 0.0
    step1_mode: str = "fourth_order"
    v0_min: float = 1.4
    v0_max: float = 6.0
    eps_min: float = 0.0
    eps_max: float = 0.3
    delta_min: float = 0.0
    delta_max: float = 0.3
    pml_velocity: float = 0.0  # 0 uses the largest true v0


@dataclass
class NoiseSpec:
    snr_db: float = math.inf
    seed: int = 2024


@dataclass
class OutputSpec:
    directory: str = "out"
    clim_v0: tuple = (2.8, 3.5)
    clim_eps: tuple = (0.0, 0.25)
    clim_delta: tuple = (0.0, 0.25)


@dataclass
class LandscapeSpec:
    frequency: float = 3.0
    n_alpha: int = 41
    n_beta: int = 41
    beta_line: float = 1.0
    passive_delta: str = "smoothed"  # smoothed | true


@dataclass
class ExperimentConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    inversion: InversionSpec = field(default_factory=InversionSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    landscape: LandscapeSpec = field(default_factory=LandscapeSpec)


SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, section: str, key: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = text.split()
            conv = str if (default and isinstance(default[0], str)) or key in ("active", "anomaly_classes") else float
            return tuple(conv(v) for v in items)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from exc


def from_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        spec = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(spec)}
        for key, value in cp[section].items():
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(spec, key, _parse(value, getattr(spec, key), section, key))
    return cfg


def to_text(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section in SECTIONS:
        spec = getattr(cfg, section)
        cp[section] = {f.name: _format(getattr(spec, f.name)) for f in dataclasses.fields(spec)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return from_text(fh.read())


def save(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(to_text(cfg))


def layered_defaults() -> ExperimentConfig:
    """Scaled layered analog: 4 km x 1.5 km, surface fixed spread, free surface."""
    cfg = ExperimentConfig()
    cfg.grid = GridSpec(nx=200, nz=75, spacing=0.02, pml_width=10, free_surface=True)
    cfg.model = dataclasses.replace(ModelSpec(), kind="layered")
    cfg.acquisition = AcquisitionSpec(kind="surface")
    cfg.schedule = ScheduleSpec(frequencies=(), paths=(3.0, 6.0, 4.0, 8.5, 6.0, 12.0))
    cfg.inversion = dataclasses.replace(InversionSpec(), active=("v0", "eps"), k_max=15,
                                        eps_prior_factor=10.0)
    cfg.output = dataclasses.replace(OutputSpec(), clim_v0=(1.4, 3.4), clim_eps=(0.0, 0.3),
                                     clim_delta=(0.0, 0.3))
    return cfg


def layered_coarse() -> ExperimentConfig:
    """40 m version of the layered analog restricted to the first path, for quick checks."""
    cfg = layered_defaults()
    cfg.grid = GridSpec(nx=100, nz=38, spacing=0.04, pml_width=8, free_surface=True)
    cfg.acquisition = AcquisitionSpec(kind="surface", source_spacing=0.2, receiver_spacing=0.04,
                                      source_depth=0.08, receiver_depth=0.04)
    cfg.schedule = ScheduleSpec(frequencies=(), paths=(3.0, 6.0))
    return cfg
