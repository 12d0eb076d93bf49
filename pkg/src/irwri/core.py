"""ADMM wavefield reconstruction inversion with bounds and total variation.

One iteration on a frequency batch:

1. reconstruct wavefields that fit both the data and the wave equation;
2. update the model from the model-linear form of the wave equation;
3. shrink the model gradients (TV splitting variable ``p``);
4. project onto the bounds (splitting variable ``q``);
5. accumulate the scaled duals;
6. test the stopping rule.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .linalg import Factorization, SolveError, max_eigenvalue, relative_residual, solve
from .medium import ActiveSet, Bounds, OptimizationModel
from .mesh_fd import Grid, build_tv_gradient
from .survey import Acquisition, DataSet, build_P, build_ptilde, point_sources
from .virtual_src import EstimationSystem, accumulate_normal, assemble_L, pairwise_sum
from .wave_ops import (FDOperators, SecondOrderOperator, WavefieldBatch, assemble_second_order,
                       build_fourth_order, fourth_order_ok, make_operators)

log = logging.getLogger(__name__)

REGULARIZATIONS = ("dmp", "dmp+tv")
STEP1_MODES = ("fourth_order", "augmented")


# --- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class InversionConfig:
    active: ActiveSet = field(default_factory=ActiveSet)
    regularization: str = "dmp+tv"
    k_max: int = 25
    eps_b: float = 1e-3
    eps_d: float = 1e-5
    noisy: bool = False
    lam_fraction: float | None = None  # of xi; None picks 1e-2 or 1 from ``noisy``
    lam1_percent: float = 0.1
    lam1_growth: float = 1.0
    tv_percent: float = 0.02
    damping_ratio: float = 1.0
    tv_ratio: float = 1.0
    eps_prior_factor: float = 0.0  # prior weight as a multiple of the eps damping weight
    step1_mode: str = "fourth_order"
    refine: int = 2

    def __post_init__(self):
        if self.regularization not in REGULARIZATIONS:
            raise ValueError(f"regularization must be one of {REGULARIZATIONS}")
        if self.step1_mode not in STEP1_MODES:
            raise ValueError(f"step1_mode must be one of {STEP1_MODES}")
        if self.k_max < 1:
            raise ValueError("k_max must be positive")

    @property
    def fraction(self) -> float:
        if self.lam_fraction is not None:
            return self.lam_fraction
        return 1.0 if self.noisy else 1e-2

    @property
    def use_tv(self) -> bool:
        return self.regularization == "dmp+tv"


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty weights for one batch.

    ``lam0[f]`` weighs the data rows of frequency ``f`` and ``lam1`` the wave
    rows; ``gamma`` is the per-class weight of the TV splitting term, ``zeta``
    the bound/damping weight and ``tv_threshold`` the shrinkage level.
    """

    lam1: float
    lam0: tuple[float, ...]
    xi: tuple[float, ...]
    gamma: tuple[float, ...]
    zeta: tuple[float, ...]
    tv_threshold: tuple[float, ...]
    eps_prior_weight: float = 0.0
    lam1_growth: float = 1.0

    def __post_init__(self):
        if not self.lam1 > 0 or not all(v > 0 for v in self.lam0):
            raise ValueError("lam0 and lam1 must be positive")

    @property
    def lam(self) -> tuple[float, ...]:
        return tuple(self.lam1 / l0 for l0 in self.lam0)

    @property
    def prox_gamma(self) -> tuple[float, ...]:
        """Shrink parameter of the TV prox (reciprocal of the threshold, 0 when inactive)."""
        return tuple(1.0 / t if t > 0 else 0.0 for t in self.tv_threshold)


def tv_thresholds(z: np.ndarray, n_classes: int, percent: float = 0.02) -> tuple[float, ...]:
    """``percent`` of the largest gradient magnitude in each class (0 for flat classes)."""
    zx, zz = _split_gradient(z, n_classes)
    r = np.sqrt(zx ** 2 + zz ** 2)
    return tuple(float(percent * np.max(r[i])) if r.shape[1] else 0.0 for i in range(n_classes))


def tune_hyperparameters(system: EstimationSystem, xi, config: InversionConfig, grid: Grid,
                         z: np.ndarray | None = None) -> PenaltyConfig:
    """Data-driven penalty weights from the current normal operator and ``xi``.

    ``lam1`` is a percentage of the mean absolute diagonal of ``sum L^H L``;
    ``lam1 / lam0`` per frequency is ``fraction * xi``.  Damping weights are
    per class, proportional to ``lam1`` times the mean diagonal of that
    class, so that the classes see comparable regularisation despite their
    very different sensitivities.
    """
    C = system.H.shape[0]
    lam1 = config.lam1_percent * system.mean_abs_diagonal()
    if not lam1 > 0:
        lam1 = 1.0
    lam = [config.fraction * x for x in xi]
    lam0 = tuple(lam1 / l if l > 0 else lam1 for l in lam)
    diag_means = [float(np.mean(np.abs(system.H[i, i].real))) for i in range(C)]
    zeta = tuple(config.damping_ratio * lam1 * d for d in diag_means)
    if config.use_tv:
        gamma = tuple(config.tv_ratio * zt * grid.dx * grid.dz for zt in zeta)
    else:
        gamma = (0.0,) * C
    thresholds = tv_thresholds(z, C, config.tv_percent) if (z is not None and config.use_tv) else (0.0,) * C
    eps_w = 0.0
    if config.eps_prior_factor and config.active.eps:
        eps_w = config.eps_prior_factor * zeta[config.active.classes.index(1)]
    return PenaltyConfig(lam1, lam0, tuple(float(x) for x in xi), gamma, zeta, thresholds, eps_w,
                         config.lam1_growth)


# --- primal pieces -----------------------------------------------------------

def tv_operator(grid: Grid, n_classes: int) -> sp.csr_matrix:
    """``[Gx; Gz]`` per class, block diagonal over classes (rows ``2 C n``)."""
    gx, gz = build_tv_gradient(grid)
    G = sp.vstack([gx, gz])
    return sp.csr_matrix(sp.block_diag([G] * n_classes))


def _split_gradient(z, n_classes):
    z = np.asarray(z, dtype=float).reshape(n_classes, 2, -1)
    return z[:, 0, :], z[:, 1, :]


def tv_prox(z: np.ndarray, gamma, n_classes: int | None = None) -> np.ndarray:
    """Isotropic shrinkage ``xi = max(1 - 1/(gamma r), 0)`` applied per cell and class.

    ``z`` stacks ``[zx; zz]`` for each class; ``gamma`` holds one value per
    class.  ``gamma = 0`` or ``r = 0`` maps to zero.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    C = len(gamma) if n_classes is None else n_classes
    zx, zz = _split_gradient(z, C)
    r = np.sqrt(zx ** 2 + zz ** 2)
    g = np.broadcast_to(gamma[:, None], r.shape)
    gr = g * r
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.where(gr > 0, np.maximum(1.0 - 1.0 / gr, 0.0), 0.0)
    return np.stack([xi * zx, xi * zz], axis=1).reshape(-1)


def project_bounds(x: np.ndarray, bounds: Bounds) -> np.ndarray:
    return np.minimum(np.maximum(x, bounds.lower), bounds.upper)


@dataclass
class AuxiliaryPrimal:
    p: np.ndarray
    q: np.ndarray


@dataclass
class DualState:
    """Scaled duals; ``S[f]`` is ``2n x ns`` and ``D[f]`` is ``nr x ns``."""

    S: list
    D: list
    p: np.ndarray
    q: np.ndarray

    @classmethod
    def zeros(cls, n_freq, n_wave, n_rec, n_src, dim):
        return cls([np.zeros((n_wave, n_src), complex) for _ in range(n_freq)],
                   [np.zeros((n_rec, n_src), complex) for _ in range(n_freq)],
                   np.zeros(2 * dim), np.zeros(dim))

    def copy(self) -> "DualState":
        return DualState([a.copy() for a in self.S], [a.copy() for a in self.D], self.p.copy(), self.q.copy())


@dataclass(frozen=True)
class Residuals:
    """Constraint violations entering the dual ascent (target minus achieved)."""

    S: list
    D: list
    p: np.ndarray
    q: np.ndarray


def update_duals(duals: DualState, res: Residuals) -> DualState:
    return DualState([a + b for a, b in zip(duals.S, res.S)], [a + b for a, b in zip(duals.D, res.D)],
                     duals.p + res.p, duals.q + res.q)


def check_stop(wave_rel: float, data_rel: float, eps_b: float, eps_d: float, k: int, k_max: int) -> bool:
    return k >= k_max or (wave_rel <= eps_b and data_rel <= eps_d)


# --- step 1 ------------------------------------------------------------------

@dataclass(frozen=True)
class Step1Report:
    mode: str
    optimality: float  # gradient norm of the solved quadratic over its rhs norm


def reconstruct_wavefields(op: SecondOrderOperator, P: sp.spmatrix, Ptilde: sp.spmatrix, S: np.ndarray,
                           D: np.ndarray, lam0: float, lam1: float, mode: str = "fourth_order",
                           refine: int = 2) -> tuple[WavefieldBatch, Step1Report]:
    """Minimise ``lam0 ||P U - D||^2 + lam1 ||A U - S||^2`` over ``U``.

    ``S`` (``2n x ns``) and ``D`` (``nr x ns``) already include the duals.
    The fourth-order path eliminates ``Uz`` exactly and solves on ``Ux``
    only; it falls back to the full 2n system when ``m_v0 m_delta`` is near 0.
    """
    n = op.n
    if mode == "fourth_order" and not fourth_order_ok(op.model):
        log.warning("m_v0*m_delta near zero; using the augmented 2n system")
        mode = "augmented"
    if mode == "fourth_order":
        sysm = build_fourth_order(op.model, op.ops, Ptilde, D, S[:n], S[n:], lam0, lam1)
        ux, uz = sysm.solve(refine)
        rhs = sysm.normal_rhs()
        opt = relative_residual(sysm.normal, ux, rhs)
        return WavefieldBatch(ux, uz, op.omega), Step1Report(mode, opt)
    if mode != "augmented":
        raise ValueError(f"unknown step-1 mode {mode!r}")
    A = op.A
    N = sp.csr_matrix(lam1 * (A.conj().T @ A) + lam0 * (P.T @ P))
    rhs_of = lambda bw, bd: lam1 * (A.conj().T @ bw) + lam0 * (P.T @ bd)  # noqa: E731
    fac = Factorization(N)
    rhs = rhs_of(S, D)
    U = fac.solve(rhs)
    for _ in range(refine):
        U = U + fac.solve(rhs_of(S - A @ U, D - P @ U))
    opt = relative_residual(N, U, rhs)
    return WavefieldBatch(U[:n], U[n:], op.omega), Step1Report(mode, opt)


def data_weight_xi(op: SecondOrderOperator, P: sp.spmatrix, seed: int = 1234) -> float:
    """Largest eigenvalue of ``A^-H P^T P A^-1`` by power iteration."""
    fac = Factorization(op.A)
    PtP = sp.csr_matrix(P.T @ P)

    def matvec(x):
        return fac.solve(PtP @ fac.solve(x), trans="H")

    est = max_eigenvalue(matvec, op.A.shape[0], complex, seed=seed)
    if not est.converged:
        log.warning("xi estimate did not converge; using last iterate %.4g", est.value)
    return est.value


# --- step 2 ------------------------------------------------------------------

@dataclass(frozen=True)
class Step2Report:
    optimality: float


def estimate_model(system: EstimationSystem, model: OptimizationModel, aux: AuxiliaryPrimal,
                   duals: DualState, penalties: PenaltyConfig, Gtv: sp.spmatrix | None,
                   eps_prior: np.ndarray | None = None) -> tuple[OptimizationModel, Step2Report]:
    """Solve the real normal equations of the regularised model-update stack.

    ``system`` must already sum over sources and frequencies.  Returns the
    model with its active classes replaced.
    """
    active = system.active
    n, C = system.n, system.H.shape[0]
    K = penalties.lam1 * system.normal_matrix(real=True)
    rhs = penalties.lam1 * system.rhs(real=True)
    zeta = np.repeat(np.asarray(penalties.zeta, dtype=float), n)
    K = K + sp.diags(zeta)
    rhs = rhs + zeta * (aux.q + duals.q)
    if Gtv is not None and any(g > 0 for g in penalties.gamma):
        gam = np.repeat(np.asarray(penalties.gamma, dtype=float), 2 * n)
        K = K + Gtv.T @ sp.diags(gam) @ Gtv
        rhs = rhs + Gtv.T @ (gam * (aux.p + duals.p))
    if penalties.eps_prior_weight > 0 and active.eps:
        j = active.classes.index(1)
        w = np.zeros(C * n)
        w[j * n:(j + 1) * n] = penalties.eps_prior_weight
        prior = np.zeros(C * n)
        prior[j * n:(j + 1) * n] = eps_prior if eps_prior is not None else model.m_eps
        K = K + sp.diags(w)
        rhs = rhs + w * prior
    K = sp.csr_matrix(K)
    try:
        x, report = solve(K, rhs)
    except SolveError as exc:
        raise SolveError(f"model update system is singular: {exc}", exc.report) from exc
    return model.with_active(x, active), Step2Report(report.relative_residual)


# --- problem definition and batch driver -------------------------------------

@dataclass
class InversionProblem:
    grid: Grid
    acquisition: Acquisition
    data: DataSet
    bounds: Bounds  # full 3n bounds
    pml_velocity: float
    amplitude: float = 1.0
    truth: OptimizationModel | None = None
    eps_prior: np.ndarray | None = None  # m-space eps field for the prior term
    _cache: dict = field(default_factory=dict, repr=False)

    def sampling(self):
        if "P" not in self._cache:
            self._cache["P"] = build_P(self.grid, self.acquisition.receivers)
            self._cache["Pt"] = build_ptilde(self.grid, self.acquisition.receivers)
            self._cache["s"] = point_sources(self.grid, self.acquisition.sources, self.amplitude)
        return self._cache["P"], self._cache["Pt"], self._cache["s"]

    def operators(self, freq: float) -> FDOperators:
        key = ("ops", round(float(freq), 9))
        if key not in self._cache:
            self._cache[key] = make_operators(self.grid, 2 * np.pi * freq, self.pml_velocity)
        return self._cache[key]

    def source_rhs(self, freq: float) -> np.ndarray:
        _, _, s = self.sampling()
        w2 = (2 * np.pi * freq) ** 2
        return np.concatenate([w2 * s, w2 * s])


@dataclass
class IterationRecord:
    batch: int
    iteration: int
    frequencies: str
    data_residual: float
    wave_residual: float
    data_rel: float
    wave_rel: float
    step1_optimality: float
    step2_optimality: float
    rms_v0: float
    rms_eps: float
    rms_delta: float
    wall_time: float


class IterationLog:
    """Append-only per-iteration record."""

    columns = [f.name for f in IterationRecord.__dataclass_fields__.values()]

    def __init__(self):
        self._rows: list[IterationRecord] = []

    def append(self, rec: IterationRecord):
        self._rows.append(rec)

    def __len__(self):
        return len(self._rows)

    def __iter__(self):
        return iter(self._rows)

    def __getitem__(self, i):
        return self._rows[i]

    def rows(self):
        return list(self._rows)

    def write_csv(self, path: str):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self._rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def class_rms_errors(m: OptimizationModel, truth: OptimizationModel | None, grid: Grid) -> tuple[float, ...]:
    """Interior RMS error per class relative to the mean true value."""
    if truth is None:
        return (float("nan"),) * 3
    mask = grid.interior_mask().ravel()
    out = []
    for k in range(3):
        t = truth.block(k)[mask]
        out.append(float(np.sqrt(np.mean((m.block(k)[mask] - t) ** 2)) / np.mean(np.abs(t))))
    return tuple(out)


@dataclass
class BatchResult:
    model: OptimizationModel
    log: IterationLog
    penalties: PenaltyConfig
    duals: DualState
    aux: AuxiliaryPrimal
    wavefields: list
    step1: list = field(default_factory=list)  # per iteration, list of Step1Report
    step2: list = field(default_factory=list)
    history: list = field(default_factory=list)  # Residuals per iteration when recorded
    aux_history: list = field(default_factory=list)  # AuxiliaryPrimal per iteration when recorded


def _wave_residual(m, problem, freqs, U):
    """``S - A(m) U`` per frequency."""
    out = []
    for f, u in zip(freqs, U):
        op = assemble_second_order(m, problem.operators(f))
        out.append(problem.source_rhs(f) - op.A @ u.stacked)
    return out


def run_batch(freqs, m0: OptimizationModel, problem: InversionProblem, config: InversionConfig,
              log_: IterationLog | None = None, batch_index: int = 0, record_history: bool = False,
              penalties: PenaltyConfig | None = None) -> BatchResult:
    """Steps 1 to 6 on one frequency batch, starting from fresh duals."""
    freqs = [float(f) for f in freqs]
    if sorted(freqs) != freqs:
        raise ValueError("batch frequencies must be ascending")
    grid = problem.grid
    active = config.active
    n, C = grid.n, active.count
    P, Pt, _ = problem.sampling()
    ns, nr = problem.acquisition.n_sources, problem.acquisition.n_receivers
    D = [problem.data.receiver_matrix(f) for f in freqs]
    S = [problem.source_rhs(f) for f in freqs]
    norm_D = float(np.sqrt(sum(np.linalg.norm(d) ** 2 for d in D)))
    norm_S = float(np.sqrt(sum(np.linalg.norm(s) ** 2 for s in S)))
    eps_d = config.eps_d
    if config.noisy:
        eps_d = max(eps_d, problem.data.noise_norm(freqs) / norm_D)
    bounds = problem.bounds.restrict(active, n)
    Gtv = tv_operator(grid, C) if config.use_tv else None
    log_ = log_ if log_ is not None else IterationLog()

    m = m0
    x0 = m.active_vector(active)
    aux = AuxiliaryPrimal(p=(tv_operator(grid, C) @ x0), q=project_bounds(x0, bounds))
    duals = DualState.zeros(len(freqs), 2 * n, nr, ns, C * n)
    ops = [problem.operators(f) for f in freqs]
    xi = None
    result = BatchResult(m, log_, penalties, duals, aux, [])
    t0 = time.perf_counter()
    for k in range(1, config.k_max + 1):
        # step 1
        A_ops = [assemble_second_order(m, o) for o in ops]
        if xi is None:
            xi = [data_weight_xi(op, P) for op in A_ops]
        lam1 = penalties.lam1 if penalties is not None else 1.0
        lam0 = penalties.lam0 if penalties is not None else tuple(1.0 / (config.fraction * x) for x in xi)
        U, rep1 = [], []
        for i, op in enumerate(A_ops):
            u, r = reconstruct_wavefields(op, P, Pt, S[i] + duals.S[i], D[i] + duals.D[i],
                                          lam0[i], lam1, config.step1_mode, config.refine)
            U.append(u)
            rep1.append(r)
        # step 2
        parts = []
        for i, (f, u) in enumerate(zip(freqs, U)):
            L, y = assemble_L(u.ux, u.uz, ops[i], active, m, S[i][:n], S[i][n:])
            sd = duals.S[i] if L.structure.shape[0] == 2 else duals.S[i][:n]
            parts.append(accumulate_normal(L, y, sd, active))
        system = pairwise_sum(parts)
        if penalties is None:
            z0 = Gtv @ x0 - duals.p if Gtv is not None else None
            penalties = tune_hyperparameters(system, xi, config, grid, z0)
            # rescale so that step 1 uses the batch penalties from now on
            lam1, lam0 = penalties.lam1, penalties.lam0
        elif k > 1 and penalties.lam1_growth != 1.0:
            penalties = replace(penalties, lam1=penalties.lam1 * penalties.lam1_growth)
        m_new, rep2 = estimate_model(system, m, aux, duals, penalties, Gtv, problem.eps_prior)
        x = m_new.active_vector(active)
        # step 3
        if Gtv is not None:
            z = Gtv @ x - duals.p
            thr = tv_thresholds(z, C, config.tv_percent)
            penalties = replace(penalties, tv_threshold=thr)
            p = tv_prox(z, penalties.prox_gamma, C)
        else:
            p = aux.p
        # step 4
        q = project_bounds(x - duals.q, bounds)
        aux = AuxiliaryPrimal(p, q)
        # step 5
        res_S = _wave_residual(m_new, problem, freqs, U)
        res_D = [d - P @ u.stacked for d, u in zip(D, U)]
        res_p = (p - Gtv @ x) if Gtv is not None else np.zeros_like(duals.p)
        res = Residuals(res_S, res_D, res_p, q - x)
        duals = update_duals(duals, res)
        m = m_new
        # step 6
        wave_abs = float(np.sqrt(sum(np.linalg.norm(r) ** 2 for r in res_S)))
        data_abs = float(np.sqrt(sum(np.linalg.norm(r) ** 2 for r in res_D)))
        rms = class_rms_errors(m, problem.truth, grid)
        log_.append(IterationRecord(batch_index, k, " ".join(f"{f:g}" for f in freqs), data_abs, wave_abs,
                                    data_abs / norm_D, wave_abs / norm_S,
                                    max(r.optimality for r in rep1), rep2.optimality,
                                    *rms, time.perf_counter() - t0))
        result.step1.append(rep1)
        result.step2.append(rep2)
        if record_history:
            result.history.append(res)
            result.aux_history.append(aux)
        log.info("batch %d it %d: data %.3e wave %.3e rms %s", batch_index, k, data_abs / norm_D,
                 wave_abs / norm_S, ", ".join(f"{v:.4f}" for v in rms))
        if check_stop(wave_abs / norm_S, data_abs / norm_D, config.eps_b, eps_d, k, config.k_max):
            break
    result.model, result.penalties, result.duals, result.aux, result.wavefields = m, penalties, duals, aux, U
    return result


# --- frequency continuation --------------------------------------------------

DEFAULT_PATHS = ((3.0, 6.0), (4.0, 8.5), (6.0, 15.0))


def path_frequencies(f_start: float, f_stop: float, spacing: float = 0.5) -> list[float]:
    count = int(round((f_stop - f_start) / spacing)) + 1
    return [round(f_start + i * spacing, 9) for i in range(count)]


def make_batches(freqs, size: int = 2, overlap: int = 1) -> list[list[float]]:
    """Consecutive batches of ``size`` frequencies sharing ``overlap`` frequencies."""
    step = size - overlap
    if step < 1:
        raise ValueError("overlap must be smaller than the batch size")
    freqs = list(freqs)
    if len(freqs) <= size:
        return [freqs]
    return [freqs[i:i + size] for i in range(0, len(freqs) - size + 1, step)]


def path_batches(schedule=DEFAULT_PATHS, spacing: float = 0.5, size: int = 2, overlap: int = 1):
    return [make_batches(path_frequencies(a, b, spacing), size, overlap) for a, b in schedule]


@dataclass
class PathResult:
    model: OptimizationModel
    log: IterationLog
    batch_models: list


def run_paths(schedule, m0: OptimizationModel, problem: InversionProblem, config: InversionConfig,
              spacing: float = 0.5, size: int = 2, overlap: int = 1) -> PathResult:
    """Sweep every path's batches in turn; each batch starts from the previous model."""
    log_ = IterationLog()
    m = m0
    models = []
    b = 0
    for batches in path_batches(schedule, spacing, size, overlap):
        for freqs in batches:
            res = run_batch(freqs, m, problem, config, log_, batch_index=b)
            m = res.model
            models.append(m)
            b += 1
    return PathResult(m, log_, models)
