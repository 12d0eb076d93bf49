"""Frequency-domain VTI acoustic wave operators.

Four equivalent discretisations share the derivative matrices of
:mod:`irwri.mesh_fd`:

* the compact second-order pair ``A(m) [Ux; Uz] = w^2 [Sx; Sz]``;
* the first-order velocity-stress system in stiffness form,
  unknowns ``[Vx; Vz; Ux; Uz]``;
* the same system with compliance coefficients;
* the fourth-order reduction which eliminates ``Uz`` through
  ``Uz = Az Ux + Bz`` and leaves an ``n``-unknown least-squares problem.

Right-hand sides are passed in full (``w^2 s`` already applied), so
dual-variable updates can be added to them directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import Factorization, SolveError
from .medium import ComplianceModel, OptimizationModel, StiffnessModel
from .mesh_fd import FDOperators, Grid, build_pml, fd_operators, nine_point_operators

SINGULAR_THRESHOLD = 1e-6


class ModelSizeError(ValueError):
    pass


def make_operators(grid: Grid, omega: float, pml_velocity: float, reflection: float = 1e-3) -> FDOperators:
    return fd_operators(grid, build_pml(grid, omega, pml_velocity, reflection))


def _diag(v) -> sp.dia_matrix:
    return sp.diags(np.asarray(v))


def _check(m: OptimizationModel, grid: Grid):
    if m.n != grid.n:
        raise ModelSizeError(f"model has {m.n} cells, grid has {grid.n}")


@dataclass(frozen=True)
class SecondOrderOperator:
    A: sp.csr_matrix
    omega: float
    model: OptimizationModel
    ops: FDOperators
    scheme: str = "compact"

    @property
    def n(self) -> int:
        return self.model.n

    def residual(self, ux, uz, sx, sz):
        """``A [ux; uz] - [sx; sz]`` split into its two row blocks."""
        r = self.A @ np.concatenate([ux, uz]) - np.concatenate([sx, sz])
        return r[: self.n], r[self.n:]


def assemble_second_order(m: OptimizationModel, ops: FDOperators, scheme: str = "compact") -> SecondOrderOperator:
    """Compact 2x2 VTI operator at the PML frequency of ``ops``.

    ``scheme="nine_point"`` swaps in the averaged 9-point Laplacian pieces and
    the lumped mass term; it is meant for forward modelling only.
    """
    _check(m, ops.grid)
    w2 = ops.omega ** 2
    if scheme == "compact":
        dxx, dzz = ops.dxx, ops.dzz
        mass = _diag(w2 * m.m_v0)
    elif scheme == "nine_point":
        dxx, dzz, lump = nine_point_operators(ops.grid, ops.pml)
        mass = _diag(w2 * m.m_v0) @ lump
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    A = sp.bmat([
        [mass + _diag(m.m_eps) @ dxx, _diag(m.m_delta) @ dzz],
        [_diag(m.m_delta) @ dxx, mass + dzz],
    ], format="csr")
    A.sort_indices()
    return SecondOrderOperator(A, ops.omega, m, ops, scheme)


def second_order_rhs(omega: float, sx, sz=None) -> np.ndarray:
    """``w^2 [sx; sz]`` (``sz`` defaults to ``sx``)."""
    sx = np.asarray(sx)
    sz = sx if sz is None else np.asarray(sz)
    return omega ** 2 * np.concatenate([sx, sz])


def scalar_helmholtz(m_v0, ops: FDOperators) -> sp.csr_matrix:
    return sp.csr_matrix(_diag(ops.omega ** 2 * np.asarray(m_v0)) + ops.dxx + ops.dzz)


# --- first-order systems -----------------------------------------------------

def assemble_first_order_stiffness(sm: StiffnessModel, ops: FDOperators) -> sp.csr_matrix:
    """Velocity-stress system on ``[Vx; Vz; Ux; Uz]``."""
    n = ops.grid.n
    c11, c13, c33, b = (np.ravel(a) for a in (sm.c11, sm.c13, sm.c33, sm.buoyancy))
    if c11.size != n:
        raise ModelSizeError(f"stiffness has {c11.size} cells, grid has {n}")
    iw = 1j * ops.omega * sp.identity(n)
    B = _diag(b)
    A = sp.bmat([
        [iw, None, B @ ops.dx_half, None],
        [None, iw, None, B @ ops.dz_half],
        [_diag(c11) @ ops.dx_node, _diag(c13) @ ops.dz_node, iw, None],
        [_diag(c13) @ ops.dx_node, _diag(c33) @ ops.dz_node, None, iw],
    ], format="csr")
    A.sort_indices()
    return A


def assemble_first_order_compliance(cm: ComplianceModel, ops: FDOperators) -> sp.csr_matrix:
    """Velocity-stress system with the stress rows multiplied by the compliance."""
    n = ops.grid.n
    s11, s13, s33, b = (np.ravel(a) for a in (cm.s11, cm.s13, cm.s33, cm.buoyancy))
    if s11.size != n:
        raise ModelSizeError(f"compliance has {s11.size} cells, grid has {n}")
    iw = 1j * ops.omega
    I = sp.identity(n)
    B = _diag(b)
    A = sp.bmat([
        [iw * I, None, B @ ops.dx_half, None],
        [None, iw * I, None, B @ ops.dz_half],
        [ops.dx_node, None, iw * _diag(s11), iw * _diag(s13)],
        [None, ops.dz_node, iw * _diag(s13), iw * _diag(s33)],
    ], format="csr")
    A.sort_indices()
    return A


def first_order_rhs(omega: float, sx, sz=None) -> np.ndarray:
    """``i w [0; 0; sx; sz]``."""
    sx = np.asarray(sx)
    sz = sx if sz is None else np.asarray(sz)
    zero = np.zeros_like(sx, dtype=complex)
    return 1j * omega * np.concatenate([zero, zero, sx, sz])


def assemble_second_order_compliance(cm: ComplianceModel, ops: FDOperators) -> sp.csr_matrix:
    """Pressure-only compliance system, right-hand side ``[sx; sz]``."""
    b = _diag(np.ravel(cm.buoyancy))
    w2 = ops.omega ** 2
    A = sp.bmat([
        [ops.dx_node @ b @ ops.dx_half / w2 + _diag(np.ravel(cm.s11)), _diag(np.ravel(cm.s13))],
        [_diag(np.ravel(cm.s13)), ops.dz_node @ b @ ops.dz_half / w2 + _diag(np.ravel(cm.s33))],
    ], format="csr")
    A.sort_indices()
    return A


def split_first_order(x: np.ndarray, n: int):
    """``(vx, vz, ux, uz)`` from a stacked first-order solution."""
    return x[:n], x[n:2 * n], x[2 * n:3 * n], x[3 * n:]


# --- fourth-order reduction --------------------------------------------------

@dataclass
class FourthOrderSystem:
    """Least-squares rows ``[sqrt(l1) W; sqrt(l0) Q] ux = [sqrt(l1) bw; sqrt(l0) bd]``.

    ``W`` is the reduced wave operator on ``Ux`` and ``Q = P~ (I + Az) / 2`` the
    data row; ``Uz = Az Ux + Bz`` recovers the vertical component.
    """

    W: sp.csr_matrix
    Q: sp.csr_matrix
    Az: sp.csr_matrix
    Bz: np.ndarray
    rhs_wave: np.ndarray
    rhs_data: np.ndarray
    lam0: float
    lam1: float
    _normal: sp.csr_matrix | None = field(default=None, repr=False)
    _factor: Factorization | None = field(default=None, repr=False)

    @property
    def normal(self) -> sp.csr_matrix:
        if self._normal is None:
            N = self.lam1 * (self.W.conj().T @ self.W)
            if self.lam0:
                N = N + self.lam0 * (self.Q.conj().T @ self.Q)
            self._normal = sp.csr_matrix(N)
        return self._normal

    def normal_rhs(self, bw=None, bd=None) -> np.ndarray:
        bw = self.rhs_wave if bw is None else bw
        bd = self.rhs_data if bd is None else bd
        r = self.lam1 * (self.W.conj().T @ bw)
        if self.lam0:
            r = r + self.lam0 * (self.Q.conj().T @ bd)
        return r

    def gradient(self, ux) -> np.ndarray:
        """Gradient of the reduced cost (up to a factor 2) at ``ux``."""
        return self.normal @ ux - self.normal_rhs()

    def solve(self, refine: int = 2):
        """Normal equations plus corrected semi-normal refinement.

        Returns ``(ux, uz)``.
        """
        if self._factor is None:
            self._factor = Factorization(self.normal)
        ux = self._factor.solve(self.normal_rhs())
        for _ in range(refine):
            rw = self.rhs_wave - self.W @ ux
            rd = self.rhs_data - self.Q @ ux
            ux = ux + self._factor.solve(self.normal_rhs(rw, rd))
        return ux, self.recover_uz(ux)

    def recover_uz(self, ux):
        return self.Az @ ux + self.Bz


def fourth_order_ok(m: OptimizationModel, threshold: float = SINGULAR_THRESHOLD) -> bool:
    return bool(np.min(np.abs(m.m_v0 * m.m_delta)) >= threshold)


def build_fourth_order(m: OptimizationModel, ops: FDOperators, Ptilde: sp.spmatrix, D, Sx, Sz,
                       lam0: float, lam1: float) -> FourthOrderSystem:
    """Eliminate ``Uz`` from the data-augmented second-order system.

    ``Sx``, ``Sz`` are full right-hand-side blocks (``n x ns``) and ``D`` the
    target data (``nr x ns``); dual variables are folded in by the caller.
    """
    _check(m, ops.grid)
    if not fourth_order_ok(m):
        raise SolveError("m_v0 * m_delta too close to zero for the fourth-order reduction")
    w2 = ops.omega ** 2
    denom = w2 * m.m_v0 * m.m_delta
    inv = _diag(1.0 / denom)
    Az = sp.csr_matrix(inv @ (_diag(m.m_eps - m.m_delta ** 2) @ ops.dxx + _diag(w2 * m.m_v0)))
    Sx = np.asarray(Sx)
    Sz = np.asarray(Sz)
    col = (lambda v: v[:, None]) if Sx.ndim == 2 else (lambda v: v)
    Bz = (col(m.m_delta) * Sz - Sx) * col(1.0 / denom)
    mdzz = _diag(m.m_delta) @ ops.dzz
    W = sp.csr_matrix(_diag(w2 * m.m_v0) + _diag(m.m_eps) @ ops.dxx + mdzz @ Az)
    half = 0.5 * sp.csr_matrix(Ptilde)
    Q = sp.csr_matrix(half @ (sp.identity(ops.grid.n) + Az))
    rhs_wave = Sx - mdzz @ Bz
    rhs_data = np.asarray(D) - half @ Bz
    return FourthOrderSystem(W, Q, Az, Bz, rhs_wave, rhs_data, float(lam0), float(lam1))


# --- forward modelling -------------------------------------------------------

@dataclass(frozen=True)
class WavefieldBatch:
    ux: np.ndarray
    uz: np.ndarray
    omega: float
    sources: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.ux.shape != self.uz.shape:
            raise ValueError("ux and uz shapes differ")
        if self.sources == (0, 0):
            object.__setattr__(self, "sources", (0, self.ux.shape[1] if self.ux.ndim == 2 else 1))

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.ux, self.uz])

    @property
    def pressure(self) -> np.ndarray:
        return 0.5 * (self.ux + self.uz)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.ux)) and np.all(np.isfinite(self.uz)))


def forward_solve(op: SecondOrderOperator, sx, sz=None, factorization: Factorization | None = None):
    """Solve ``A U = w^2 [sx; sz]`` for point-source columns ``sx``."""
    fac = factorization if factorization is not None else Factorization(op.A)
    rhs = second_order_rhs(op.omega, sx, sz)
    U = fac.solve(rhs)
    n = op.n
    return WavefieldBatch(U[:n], U[n:], op.omega)


def synthesize_data(pm, grid: Grid, acquisition, frequencies, pml_velocity: float | None = None,
                    amplitude: float = 1.0, return_wavefields: bool = False):
    """Model pressure data ``P U`` for every frequency (Hz) and source.

    Uses the same compact operator and sampling matrix as the inversion, so
    data generated here and predictions made there agree bit-for-bit.
    """
    from .medium import to_optimization
    from .survey import DataSet, build_P, point_sources

    m = to_optimization(pm)
    vref = float(np.max(pm.v0)) if pml_velocity is None else float(pml_velocity)
    P = build_P(grid, acquisition.receivers)
    s = point_sources(grid, acquisition.sources, amplitude)
    values = np.empty((len(frequencies), acquisition.n_sources, acquisition.n_receivers), dtype=complex)
    fields = []
    for i, f in enumerate(frequencies):
        ops = make_operators(grid, 2 * np.pi * f, vref)
        batch = forward_solve(assemble_second_order(m, ops), s)
        values[i] = (P @ batch.stacked).T
        if return_wavefields:
            fields.append(batch)
    data = DataSet(values, np.asarray(frequencies, dtype=float), acquisition.digest())
    return (data, fields) if return_wavefields else data
