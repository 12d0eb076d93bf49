"""Desk-scale experiments: circular inclusion, layered analog and misfit landscapes."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from . import config as cfgmod
from .config import ExperimentConfig
from .core import (IterationLog, InversionConfig, InversionProblem, run_batch, run_paths,
                   reconstruct_wavefields, data_weight_xi)
from .linalg import Factorization
from .medium import (CLASSES, ActiveSet, PhysicalModel, PhysicalRanges, from_optimization, make_bounds,
                     to_optimization, write_csv, write_model)
from .mesh_fd import Grid
from .survey import (Acquisition, add_noise, build_P, build_ptilde, make_surface_acquisition,
                     make_surrounding_acquisition, perimeter_size, point_sources)
from .wave_ops import assemble_second_order, make_operators, second_order_rhs, synthesize_data

log = logging.getLogger(__name__)


# --- builders ----------------------------------------------------------------

def build_grid(spec: cfgmod.GridSpec) -> Grid:
    w = spec.pml_width
    top = 0 if spec.free_surface else w
    return Grid(spec.nx + 2 * w, spec.nz + w + top, spec.spacing, spec.spacing, w, spec.free_surface)


def interior_coordinates(grid: Grid):
    """Node coordinates relative to the top-left interior node, shape ``(nz, nx)``."""
    zs, xs = grid.interior_slices()
    X, Z = np.meshgrid((np.arange(grid.nx) - xs.start) * grid.dx, (np.arange(grid.nz) - zs.start) * grid.dz)
    return X, Z


def _extend_into_pml(a: np.ndarray, grid: Grid) -> np.ndarray:
    """Replicate interior edge values across the absorbing layers."""
    zs, xs = grid.interior_slices()
    core = a[zs, xs]
    return np.pad(core, ((zs.start, grid.nz - zs.stop), (xs.start, grid.nx - xs.stop)), mode="edge")


def inclusion_models(spec: cfgmod.ModelSpec, grid: Grid):
    """True model with a centred disc anomaly, homogeneous starting model, disc mask."""
    X, Z = interior_coordinates(grid)
    zs, xs = grid.interior_slices()
    xc = 0.5 * (xs.stop - xs.start - 1) * grid.dx
    zc = 0.5 * (zs.stop - zs.start - 1) * grid.dz
    disc = np.hypot(X - xc, Z - zc) <= spec.radius + 1e-9
    bg = {"v0": spec.background_v0, "eps": spec.background_eps, "delta": spec.background_delta}
    an = {"v0": spec.anomaly_v0, "eps": spec.anomaly_eps, "delta": spec.anomaly_delta}
    fields = {}
    for name in CLASSES:
        value = an[name] if name in spec.anomaly_classes else bg[name]
        fields[name] = np.where(disc, value, bg[name])
    true = PhysicalModel(fields["v0"], fields["eps"], fields["delta"])
    init = PhysicalModel.homogeneous(grid.shape, bg["v0"], bg["eps"], bg["delta"])
    return true, init, disc


def layered_models(spec: cfgmod.ModelSpec, grid: Grid):
    """Sediment column with a low-velocity lens and a sharp reflector.

    Returns ``(true, initial, smoothed_delta)``; the starting ``v0`` is a
    laterally invariant linear gradient and the starting ``eps``/``delta``
    are Gaussian-smoothed versions of the true ones.
    """
    X, Z = interior_coordinates(grid)
    zs, xs = grid.interior_slices()
    width = (xs.stop - xs.start - 1) * grid.dx
    depth = (zs.stop - zs.start - 1) * grid.dz
    zr = Z / depth
    v0 = 1.6 + 1.2 * zr
    eps = 0.04 + 0.12 * np.clip(zr / 0.7, 0.0, 1.0)
    delta = 0.02 + 0.06 * np.clip(zr / 0.7, 0.0, 1.0)
    # thin layering in the sediments
    layer = (np.floor(zr * 6.0) % 2 == 1) & (zr < 0.7)
    v0 = v0 + np.where(layer, 0.1, 0.0)
    eps = eps + np.where(layer, 0.02, 0.0)
    # low-velocity lens
    lens = ((X - 0.5 * width) / (0.18 * width)) ** 2 + ((Z - 0.4 * depth) / (0.08 * depth)) ** 2 <= 1.0
    v0 = np.where(lens, v0 - 0.4, v0)
    # sharp reflector
    below = zr >= 0.75
    v0 = np.where(below, 3.2, v0)
    eps = np.where(below, 0.06, eps)
    delta = np.where(below, 0.03, delta)
    v0, eps, delta = (_extend_into_pml(a, grid) for a in (v0, eps, delta))
    true = PhysicalModel(v0, eps, delta)
    sigma = spec.smoothing / grid.dx
    smooth = lambda a: scipy.ndimage.gaussian_filter(a, sigma, mode="nearest")  # noqa: E731
    zi = np.clip(Z / depth, 0.0, 1.0)
    v_init = _extend_into_pml(spec.init_v0_top + (spec.init_v0_bottom - spec.init_v0_top) * zi, grid)
    init = PhysicalModel(v_init, smooth(eps), smooth(delta))
    return true, init, smooth(delta)


def build_acquisition(spec: cfgmod.AcquisitionSpec, grid: Grid) -> Acquisition:
    zs, xs = grid.interior_slices()
    if spec.kind == "surrounding":
        n_r = spec.n_receivers or perimeter_size(grid, spec.inset)
        return make_surrounding_acquisition(grid, spec.n_sources, n_r, spec.inset)
    if spec.kind == "surface":
        acq = make_surface_acquisition(grid, spec.source_spacing, spec.receiver_spacing,
                                       spec.source_depth, spec.receiver_depth)
        # snap once here so the stored geometry is the one actually used
        snap = lambda p: np.column_stack([np.rint(p[:, 0] / grid.dx) * grid.dx,  # noqa: E731
                                         np.rint(p[:, 1] / grid.dz) * grid.dz])
        return Acquisition(snap(acq.sources), snap(acq.receivers), "surface")
    raise ValueError(f"unknown acquisition kind {spec.kind!r}")


def inversion_config(spec: cfgmod.InversionSpec, noisy: bool) -> InversionConfig:
    return InversionConfig(
        active=ActiveSet.from_names(spec.active),
        regularization=spec.regularization,
        k_max=spec.k_max,
        eps_b=spec.eps_b,
        eps_d=spec.eps_d,
        noisy=noisy,
        lam_fraction=spec.lam_fraction or None,
        lam1_percent=spec.lam1_percent,
        lam1_growth=spec.lam1_growth,
        tv_percent=spec.tv_percent,
        damping_ratio=spec.damping_ratio,
        tv_ratio=spec.tv_ratio,
        eps_prior_factor=spec.eps_prior_factor,
        step1_mode=spec.step1_mode,
    )


def physical_ranges(spec: cfgmod.InversionSpec) -> PhysicalRanges:
    return PhysicalRanges((spec.v0_min, spec.v0_max), (spec.eps_min, spec.eps_max),
                          (spec.delta_min, spec.delta_max))


def schedule_frequencies(spec: cfgmod.ScheduleSpec):
    """All frequencies the schedule touches, ascending."""
    from .core import path_frequencies
    freqs = set(round(f, 9) for f in spec.frequencies)
    pairs = list(zip(spec.paths[0::2], spec.paths[1::2]))
    for a, b in pairs:
        freqs.update(path_frequencies(a, b, spec.spacing))
    return sorted(freqs), pairs


# --- reports -----------------------------------------------------------------

@dataclass
class Report:
    name: str
    grid: Grid
    config: ExperimentConfig
    models: dict = field(default_factory=dict)  # label -> PhysicalModel
    logs: dict = field(default_factory=dict)  # label -> IterationLog
    sections: dict = field(default_factory=dict)  # file stem -> (header, rows)
    metrics: dict = field(default_factory=dict)
    failure: str | None = None


def _invert(cfg: ExperimentConfig, grid: Grid, acq: Acquisition, data, init: PhysicalModel,
            truth: PhysicalModel, inv: InversionConfig, pml_velocity: float, eps_prior=None):
    bounds = make_bounds(grid.n, physical_ranges(cfg.inversion))
    problem = InversionProblem(grid, acq, data, bounds, pml_velocity, truth=to_optimization(truth),
                               eps_prior=eps_prior)
    freqs, pairs = schedule_frequencies(cfg.schedule)
    m0 = to_optimization(init)
    if pairs:
        res = run_paths(pairs, m0, problem, inv, cfg.schedule.spacing, cfg.schedule.batch_size,
                        cfg.schedule.overlap)
        return from_optimization(res.model), res.log
    res = run_batch(freqs, m0, problem, inv)
    return from_optimization(res.model), res.log


def _synthesize(cfg: ExperimentConfig, grid, acq, true, pml_velocity):
    freqs, _ = schedule_frequencies(cfg.schedule)
    data = synthesize_data(true, grid, acq, freqs, pml_velocity)
    if math.isfinite(cfg.noise.snr_db):
        data = add_noise(data, cfg.noise.snr_db, cfg.noise.seed)
    return data


def _pml_velocity(cfg, true):
    return cfg.inversion.pml_velocity or float(np.max(true.v0))


def cross_section(grid: Grid, models: dict, row: int):
    zs, xs = grid.interior_slices()
    header = ["x_km"] + [f"{label}_{name}" for label in models for name in CLASSES]
    rows = []
    for ix in range(xs.start, xs.stop):
        vals = [(ix - xs.start) * grid.dx]
        for pm in models.values():
            vals += [float(pm.field(name)[row, ix]) for name in CLASSES]
        rows.append(vals)
    return header, rows


def vertical_profile(grid: Grid, models: dict, col: int):
    zs, _ = grid.interior_slices()
    header = ["z_km"] + [f"{label}_{name}" for label in models for name in CLASSES]
    rows = []
    for iz in range(zs.start, zs.stop):
        vals = [(iz - zs.start) * grid.dz]
        for pm in models.values():
            vals += [float(pm.field(name)[iz, col]) for name in CLASSES]
        rows.append(vals)
    return header, rows


def inclusion_metrics(grid: Grid, true: PhysicalModel, est: PhysicalModel, disc: np.ndarray,
                      spec: cfgmod.ModelSpec) -> dict:
    """Inclusion-core means, background errors and leakage for one estimate.

    The core is the disc shrunk by one cell so that edge cells shared with
    the background do not bias the mean.
    """
    X, Z = interior_coordinates(grid)
    zs, xs = grid.interior_slices()
    xc = 0.5 * (xs.stop - xs.start - 1) * grid.dx
    zc = 0.5 * (zs.stop - zs.start - 1) * grid.dz
    core = np.hypot(X - xc, Z - zc) <= spec.radius - grid.dx + 1e-9
    interior = grid.interior_mask()
    background = interior & ~disc
    mt, me = to_optimization(true), to_optimization(est)
    out = {}
    for k, name in enumerate(CLASSES):
        f = est.field(name)
        out[f"core_mean_{name}"] = float(np.mean(f[core]))
        t = mt.block(k).reshape(grid.shape)
        e = me.block(k).reshape(grid.shape)
        out[f"background_rms_{name}"] = float(np.sqrt(np.mean((e - t)[background] ** 2)) / np.mean(t[background]))
        out[f"rms_{name}"] = float(np.sqrt(np.mean((est.field(name) - true.field(name))[interior] ** 2)))
    return out


def leakage(grid: Grid, true: PhysicalModel, est: PhysicalModel) -> float:
    """Relative m-space RMS error pooled over the classes whose true model is homogeneous.

    Each class error is normalised by its true value, so the three classes
    are comparable.  Returns 0 when every class carries an anomaly.
    """
    interior = grid.interior_mask()
    mt, me = to_optimization(true), to_optimization(est)
    sq = []
    for k in range(len(CLASSES)):
        t = mt.block(k).reshape(grid.shape)[interior]
        if np.ptp(t) > 0:
            continue
        e = me.block(k).reshape(grid.shape)[interior]
        sq.append(np.mean((e - t) ** 2) / t[0] ** 2)
    return float(np.sqrt(np.mean(sq))) if sq else 0.0


def run_inclusion(cfg: ExperimentConfig) -> Report:
    grid = build_grid(cfg.grid)
    true, init, disc = inclusion_models(cfg.model, grid)
    acq = build_acquisition(cfg.acquisition, grid)
    vref = _pml_velocity(cfg, true)
    data = _synthesize(cfg, grid, acq, true, vref)
    inv = inversion_config(cfg.inversion, math.isfinite(cfg.noise.snr_db))
    est, ilog = _invert(cfg, grid, acq, data, init, true, inv, vref)
    rep = Report("inclusion", grid, cfg)
    rep.models = {"true": true, "initial": init, "final": est}
    rep.logs = {"final": ilog}
    row = grid.nz // 2 if not grid.free_surface_top else (grid.interior_slices()[0].start + grid.interior_slices()[0].stop) // 2
    rep.sections["section_center"] = cross_section(grid, rep.models, row)
    rep.metrics = inclusion_metrics(grid, true, est, disc, cfg.model)
    rep.metrics["leakage"] = leakage(grid, true, est)
    rep.metrics["iterations"] = len(ilog)
    return rep


def run_layered(cfg: ExperimentConfig, actives=None) -> Report:
    """Mono-parameter (v0) and joint (v0, eps) runs with delta passive."""
    grid = build_grid(cfg.grid)
    true, init, _ = layered_models(cfg.model, grid)
    acq = build_acquisition(cfg.acquisition, grid)
    vref = _pml_velocity(cfg, true)
    data = _synthesize(cfg, grid, acq, true, vref)
    noisy = math.isfinite(cfg.noise.snr_db)
    actives = actives if actives is not None else [("v0",), tuple(cfg.inversion.active)]
    rep = Report("layered", grid, cfg)
    rep.models = {"true": true, "initial": init}
    eps_prior = to_optimization(init).m_eps
    interior = grid.interior_mask()
    seen = set()
    for act in actives:
        label = "_".join(act)
        if label in seen:
            continue
        seen.add(label)
        spec = dataclasses.replace(cfg.inversion, active=tuple(act))
        inv = inversion_config(spec, noisy)
        est, ilog = _invert(cfg, grid, acq, data, init, true, inv, vref, eps_prior)
        rep.models[label] = est
        rep.logs[label] = ilog
        for name in CLASSES:
            rep.metrics[f"{label}_rms_{name}"] = float(
                np.sqrt(np.mean((est.field(name) - true.field(name))[interior] ** 2)))
        rep.metrics[f"{label}_iterations"] = len(ilog)
    xs = grid.interior_slices()[1]
    for frac in (0.25, 0.5, 0.75):
        col = xs.start + int(round(frac * (xs.stop - xs.start - 1)))
        rep.sections[f"profile_x{int(frac * 100):02d}"] = vertical_profile(grid, rep.models, col)
    return rep


# --- misfit landscape --------------------------------------------------------

@dataclass
class Landscape:
    alpha: np.ndarray
    beta: np.ndarray
    fwi: np.ndarray  # (n_beta, n_alpha)
    wri: np.ndarray  # wave-equation term of the penalty objective at the reconstructed field
    wri_penalty: np.ndarray  # full penalty objective


def _scan_setup(cfg: ExperimentConfig):
    grid = build_grid(cfg.grid)
    true, init, smooth_delta = layered_models(cfg.model, grid)
    acq = build_acquisition(cfg.acquisition, grid)
    vref = _pml_velocity(cfg, true)
    f = cfg.landscape.frequency
    data = synthesize_data(true, grid, acq, [f], vref)
    if math.isfinite(cfg.noise.snr_db):
        data = add_noise(data, cfg.noise.snr_db, cfg.noise.seed)
    return grid, true, init, smooth_delta, acq, vref, data


def landscape_model(true: PhysicalModel, init: PhysicalModel, delta, alpha: float, beta: float) -> PhysicalModel:
    return PhysicalModel(true.v0 + abs(alpha) * (init.v0 - true.v0),
                         true.epsilon + abs(beta) * (init.epsilon - true.epsilon), delta)


def run_landscape_scan(cfg: ExperimentConfig, alphas=None, betas=None) -> Landscape:
    """FWI and WRI objectives over ``m(alpha, beta)`` at one frequency.

    ``alpha`` interpolates ``v0`` between true (0) and initial (+-1) and
    ``beta`` does the same for ``eps``; ``delta`` stays at its smoothed
    passive value (or the true one with ``passive_delta = true``).  The WRI weight ``lam`` is fixed from the starting model.
    """
    grid, true, init, smooth_delta, acq, vref, data = _scan_setup(cfg)
    if cfg.landscape.passive_delta == "true":
        smooth_delta = true.delta
    elif cfg.landscape.passive_delta != "smoothed":
        raise ValueError(f"unknown passive_delta {cfg.landscape.passive_delta!r}")
    f = cfg.landscape.frequency
    alphas = np.linspace(-1, 1, cfg.landscape.n_alpha) if alphas is None else np.asarray(alphas, float)
    betas = np.linspace(-1, 1, cfg.landscape.n_beta) if betas is None else np.asarray(betas, float)
    ops = make_operators(grid, 2 * np.pi * f, vref)
    P = build_P(grid, acq.receivers)
    Pt = build_ptilde(grid, acq.receivers)
    s = point_sources(grid, acq.sources)
    S = second_order_rhs(ops.omega, s)
    D = data.receiver_matrix(f)
    m_init = to_optimization(PhysicalModel(init.v0, init.epsilon, smooth_delta))
    xi = data_weight_xi(assemble_second_order(m_init, ops), P)
    noisy = math.isfinite(cfg.noise.snr_db)
    frac = cfg.inversion.lam_fraction or (1.0 if noisy else 1e-2)
    lam = frac * xi
    fwi = np.zeros((len(betas), len(alphas)))
    wri = np.zeros_like(fwi)
    pen = np.zeros_like(fwi)
    for j, b in enumerate(betas):
        for i, a in enumerate(alphas):
            m = to_optimization(landscape_model(true, init, smooth_delta, a, b))
            op = assemble_second_order(m, ops)
            U = Factorization(op.A).solve(S)
            fwi[j, i] = float(np.linalg.norm(P @ U - D) ** 2)
            u, _ = reconstruct_wavefields(op, P, Pt, S, D, 1.0, lam, cfg.inversion.step1_mode)
            wave = float(np.linalg.norm(op.A @ u.stacked - S) ** 2)
            wri[j, i] = lam * wave
            pen[j, i] = float(np.linalg.norm(P @ u.stacked - D) ** 2) + lam * wave
    return Landscape(alphas, betas, fwi, wri, pen)


def count_local_minima(values, prominence: float = 1e-3, exclude=None) -> int:
    """Strict interior local minima whose depth exceeds ``prominence`` of the value range.

    Depth is measured against the lower of the highest values on either side
    (a discrete topographic prominence).  ``exclude`` lists indices to skip.
    """
    v = np.asarray(values, dtype=float)
    span = float(v.max() - v.min()) or 1.0
    exclude = set(exclude or ())
    count = 0
    for i in range(1, len(v) - 1):
        if i in exclude or not (v[i] < v[i - 1] and v[i] < v[i + 1]):
            continue
        # climb until a lower point is found on each side
        l_peak = v[i]
        for j in range(i - 1, -1, -1):
            if v[j] < v[i]:
                break
            l_peak = max(l_peak, v[j])
        r_peak = v[i]
        for j in range(i + 1, len(v)):
            if v[j] < v[i]:
                break
            r_peak = max(r_peak, v[j])
        if min(l_peak, r_peak) - v[i] > prominence * span:
            count += 1
    return count


def spurious_minima_along_alpha(scape: Landscape, values: np.ndarray, beta: float = 1.0,
                                prominence: float = 1e-3) -> int:
    """Local minima other than the global one on the ``alpha >= 0`` half line at ``beta``.

    The surfaces depend on ``|alpha|``, so the half line carries all the
    information.  Away from ``beta = 0`` or with a smoothed passive class the
    global minimum can sit just off ``alpha = 0``; it is never counted.
    """
    j = int(np.argmin(np.abs(scape.beta - beta)))
    keep = scape.alpha >= -1e-12
    line = values[j][keep]
    return count_local_minima(line, prominence, exclude=[int(np.argmin(line))])


def landscape_report(cfg: ExperimentConfig, scape: Landscape) -> Report:
    grid = build_grid(cfg.grid)
    rep = Report("landscape", grid, cfg)
    rows = []
    for j, b in enumerate(scape.beta):
        for i, a in enumerate(scape.alpha):
            rows.append([float(a), float(b), scape.fwi[j, i], scape.wri[j, i], scape.wri_penalty[j, i]])
    rep.sections["landscape"] = (["alpha", "beta", "fwi", "wri", "wri_penalty"], rows)
    rep.metrics["fwi_spurious_minima"] = spurious_minima_along_alpha(scape, scape.fwi, cfg.landscape.beta_line)
    rep.metrics["wri_spurious_minima"] = spurious_minima_along_alpha(scape, scape.wri, cfg.landscape.beta_line)
    return rep


def run_forward(cfg: ExperimentConfig):
    """Synthesize the (possibly noisy) data set of an experiment."""
    grid = build_grid(cfg.grid)
    if cfg.model.kind == "layered":
        true, init, _ = layered_models(cfg.model, grid)
    else:
        true, init, _ = inclusion_models(cfg.model, grid)
    acq = build_acquisition(cfg.acquisition, grid)
    return grid, true, acq, _synthesize(cfg, grid, acq, true, _pml_velocity(cfg, true))


# --- output ------------------------------------------------------------------

def write_pgm(path: str, values: np.ndarray, clim) -> None:
    """8-bit binary greyscale image, width ``nx`` and height ``nz``, linear in ``clim``."""
    lo, hi = float(clim[0]), float(clim[1])
    scaled = np.clip((np.asarray(values, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
    img = np.rint(255.0 * scaled).astype(np.uint8)
    nz, nx = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {nz}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    nx, nz = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(nz, nx)


LOG_COLUMNS = [c for c in IterationLog.columns if c != "wall_time"]


def _write_log(directory: str, label: str, ilog: IterationLog) -> None:
    rows = [[getattr(r, c) for c in LOG_COLUMNS] for r in ilog]
    write_csv(os.path.join(directory, f"log_{label}.csv"), LOG_COLUMNS, rows)
    write_csv(os.path.join(directory, f"timing_{label}.csv"), ["batch", "iteration", "wall_time"],
              [[r.batch, r.iteration, r.wall_time] for r in ilog])


def emit_outputs(report: Report, directory: str | None = None) -> list[str]:
    """Write models, images, logs, sections and metrics; returns the written paths."""
    directory = directory or report.config.output.directory
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc}") from exc
    written = []
    cfgmod.save(report.config, os.path.join(directory, "config.ini"))
    written.append(os.path.join(directory, "config.ini"))
    clims = {"v0": report.config.output.clim_v0, "eps": report.config.output.clim_eps,
             "delta": report.config.output.clim_delta}
    g = report.grid
    for label, pm in report.models.items():
        written += write_model(directory, pm, g.dx, g.dz, prefix=f"{label}_")
        for name in CLASSES:
            path = os.path.join(directory, f"{label}_{name}.pgm")
            write_pgm(path, pm.field(name), clims[name])
            written.append(path)
    for label, ilog in report.logs.items():
        _write_log(directory, label, ilog)
        written += [os.path.join(directory, f"log_{label}.csv"), os.path.join(directory, f"timing_{label}.csv")]
    for stem, (header, rows) in report.sections.items():
        path = os.path.join(directory, f"{stem}.csv")
        write_csv(path, header, rows)
        written.append(path)
    path = os.path.join(directory, "metrics.txt")
    with open(path, "w") as fh:
        if report.failure:
            fh.write(f"failure = {report.failure}\n")
        for k in sorted(report.metrics):
            v = report.metrics[k]
            fh.write(f"{k} = {v!r}\n")
    written.append(path)
    return written
