"""Model-linear form of the wave equation.

For fixed wavefields ``(ux, uz)`` the compact operator satisfies
``A(m) u - S = L(u) m - y(u)``.  Every block of ``L`` is diagonal, so it is
stored as an array of block diagonals of shape ``(rows, cols, n)``, with an
optional trailing source axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .medium import ActiveSet, OptimizationModel
from .mesh_fd import FDOperators


@dataclass(frozen=True)
class BlockDiagonal:
    """Block matrix whose ``(r, c)`` block is ``diag(blocks[r, c])``.

    ``structure[r, c]`` is False for blocks that are zero by construction.
    With a trailing source axis the object holds one operator per source.
    """

    blocks: np.ndarray
    structure: np.ndarray

    @property
    def n(self) -> int:
        return self.blocks.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        R, C = self.structure.shape
        return (R * self.n, C * self.n)

    @property
    def batched(self) -> bool:
        return self.blocks.ndim == 4

    def source(self, l: int) -> "BlockDiagonal":
        return BlockDiagonal(self.blocks[..., l], self.structure) if self.batched else self

    def matvec(self, x) -> np.ndarray:
        """``L x`` for a real model vector (applied to every source when batched)."""
        R, C = self.structure.shape
        n = self.n
        xs = np.asarray(x).reshape(C, n)
        out = []
        for r in range(R):
            acc = 0
            for c in range(C):
                if self.structure[r, c]:
                    b = self.blocks[r, c]
                    acc = acc + (b * xs[c][:, None] if b.ndim == 2 else b * xs[c])
            out.append(acc if not np.isscalar(acc) else np.zeros(self.blocks.shape[2:], complex))
        return np.concatenate(out)

    def tocsr(self) -> sp.csr_matrix:
        if self.batched:
            raise ValueError("select one source before assembling a sparse matrix")
        R, C = self.structure.shape
        rows = [[sp.diags(self.blocks[r, c]) if self.structure[r, c] else None for c in range(C)]
                for r in range(R)]
        for r in range(R):
            if all(b is None for b in rows[r]):
                rows[r][0] = sp.csr_matrix((self.n, self.n), dtype=complex)
        for c in range(C):
            if all(rows[r][c] is None for r in range(R)):
                rows[0][c] = sp.csr_matrix((self.n, self.n), dtype=complex)
        out = sp.bmat(rows, format="csr")
        out.sort_indices()
        return out


def _wave_terms(ux, uz, ops: FDOperators):
    w2 = ops.omega ** 2
    dxx_ux = ops.dxx @ ux
    dzz_uz = ops.dzz @ uz
    return w2, dxx_ux, dzz_uz


def assemble_L_full(ux, uz, ops: FDOperators, Sx, Sz) -> tuple[BlockDiagonal, np.ndarray]:
    """All three classes active: ``L`` is ``2n x 3n`` and ``y = [Sx; Sz - dzz uz]``.

    ``Sx``, ``Sz`` are the full right-hand-side blocks (``w^2 s`` for point
    sources).  Inputs may be vectors or ``n x ns`` batches.
    """
    ux, uz = np.asarray(ux), np.asarray(uz)
    w2, dxx_ux, dzz_uz = _wave_terms(ux, uz, ops)
    zero = np.zeros_like(dxx_ux)
    blocks = np.array([
        [w2 * ux, dxx_ux, dzz_uz],
        [w2 * uz, zero, dxx_ux],
    ])
    structure = np.array([[True, True, True], [True, False, True]])
    y = np.concatenate([np.asarray(Sx) + 0.0, np.asarray(Sz) - dzz_uz])
    return BlockDiagonal(blocks, structure), y


def restrict(full: BlockDiagonal, y_full: np.ndarray, active: ActiveSet,
             model: OptimizationModel) -> tuple[BlockDiagonal, np.ndarray]:
    """Move passive classes of an all-active system into the right-hand side.

    Rows left without any active block are dropped.
    """
    n = full.n
    cols = list(active.classes)
    passive = [k for k in range(3) if k not in cols]
    y_rows = []
    keep = []
    for r in range(2):
        yr = y_full[r * n:(r + 1) * n]
        for k in passive:
            if full.structure[r, k]:
                mk = model.block(k)
                b = full.blocks[r, k]
                yr = yr - (b * mk[:, None] if b.ndim == 2 else b * mk)
        if full.structure[r, cols].any():
            keep.append(r)
            y_rows.append(yr)
    blocks = full.blocks[np.ix_(keep, cols)]
    structure = full.structure[np.ix_(keep, cols)]
    return BlockDiagonal(blocks, structure), np.concatenate(y_rows)


def assemble_L(ux, uz, ops: FDOperators, active: ActiveSet, model: OptimizationModel,
               Sx, Sz) -> tuple[BlockDiagonal, np.ndarray]:
    """Estimation system for one active/passive configuration, written out row by row.

    ``model`` supplies the passive classes; its active entries are ignored.
    """
    ux, uz = np.asarray(ux), np.asarray(uz)
    Sx, Sz = np.asarray(Sx) + 0.0, np.asarray(Sz) + 0.0
    w2, dxx_ux, dzz_uz = _wave_terms(ux, uz, ops)
    col = (lambda v: v[:, None]) if ux.ndim == 2 else (lambda v: v)
    m_v0, m_eps, m_delta = col(model.m_v0), col(model.m_eps), col(model.m_delta)
    zero = np.zeros_like(dxx_ux)
    key = active.mask
    T, F = True, False
    if key == (T, F, F):
        blocks = [[w2 * ux], [w2 * uz]]
        structure = [[T], [T]]
        y = [Sx - dxx_ux * m_eps - dzz_uz * m_delta, Sz - dzz_uz - dxx_ux * m_delta]
    elif key == (F, T, F):
        blocks = [[dxx_ux]]
        structure = [[T]]
        y = [Sx - (w2 * ux) * m_v0 - dzz_uz * m_delta]
    elif key == (F, F, T):
        blocks = [[dzz_uz], [dxx_ux]]
        structure = [[T], [T]]
        y = [Sx - (w2 * ux) * m_v0 - dxx_ux * m_eps, Sz - dzz_uz - (w2 * uz) * m_v0]
    elif key == (F, T, T):
        blocks = [[dxx_ux, dzz_uz], [zero, dxx_ux]]
        structure = [[T, T], [F, T]]
        y = [Sx - (w2 * ux) * m_v0, Sz - dzz_uz - (w2 * uz) * m_v0]
    elif key == (T, T, F):
        blocks = [[w2 * ux, dxx_ux], [w2 * uz, zero]]
        structure = [[T, T], [T, F]]
        y = [Sx - dzz_uz * m_delta, Sz - dzz_uz - dxx_ux * m_delta]
    elif key == (T, F, T):
        blocks = [[w2 * ux, dzz_uz], [w2 * uz, dxx_ux]]
        structure = [[T, T], [T, T]]
        y = [Sx - dxx_ux * m_eps, Sz - dzz_uz]
    else:
        return assemble_L_full(ux, uz, ops, Sx, Sz)
    return BlockDiagonal(np.array(blocks), np.array(structure)), np.concatenate(y)


def virtual_source(L: BlockDiagonal, k: int) -> np.ndarray:
    """Column ``k`` of ``L``: the scattered source of a unit change in parameter ``k``."""
    R, C = L.structure.shape
    n = L.n
    if not 0 <= k < C * n:
        raise IndexError(f"parameter index {k} outside [0, {C * n})")
    c, j = divmod(k, n)
    out = np.zeros((R * n,) + L.blocks.shape[3:], dtype=complex)
    for r in range(R):
        if L.structure[r, c]:
            out[r * n + j] = L.blocks[r, c, j]
    return out


# --- compliance forms --------------------------------------------------------

def assemble_L_compliance_first_order(vx, vz, ux, uz, ops: FDOperators, sx, sz=None):
    """Velocity-stress system linear in ``(b, s11, s13, s33)``.

    Returns sparse ``L`` (``4n x 4n``) and ``y`` for the right-hand side
    ``i w [0; 0; sx; sz]``.
    """
    n = ops.grid.n
    sz = sx if sz is None else sz
    iw = 1j * ops.omega
    D = sp.diags
    L = sp.bmat([
        [D(ops.dx_half @ ux), None, None, None],
        [D(ops.dz_half @ uz), None, None, None],
        [None, iw * D(ux), iw * D(uz), None],
        [None, None, iw * D(ux), iw * D(uz)],
    ], format="csr")
    y = np.concatenate([-iw * vx, -iw * vz, iw * sx - ops.dx_node @ vx, iw * sz - ops.dz_node @ vz])
    assert L.shape == (4 * n, 4 * n)
    return L, y


def assemble_L_compliance_second_order(ux, uz, ops: FDOperators, sx, sz=None):
    """Pressure-only compliance system linear in ``(b, s11, s13, s33)``.

    The buoyancy column is not diagonal: ``(1/w^2) dx_node diag(dx_half ux)``.
    """
    sz = sx if sz is None else sz
    w2 = ops.omega ** 2
    D = sp.diags
    L = sp.bmat([
        [ops.dx_node @ D(ops.dx_half @ ux) / w2, D(ux), D(uz), None],
        [ops.dz_node @ D(ops.dz_half @ uz) / w2, None, D(ux), D(uz)],
    ], format="csr")
    y = np.concatenate([np.asarray(sx) + 0.0j, np.asarray(sz) + 0.0j])
    return L, y


# --- normal equations --------------------------------------------------------

def pairwise_sum(items):
    """Deterministic tree reduction of a list of arrays."""
    items = list(items)
    if not items:
        raise ValueError("nothing to sum")
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


@dataclass(frozen=True)
class EstimationSystem:
    """``sum_l L_l^H L_l`` as ``(C, C, n)`` block diagonals and ``sum_l L_l^H (y_l + s~_l)``."""

    H: np.ndarray
    g: np.ndarray
    active: ActiveSet

    @property
    def n(self) -> int:
        return self.H.shape[2]

    def __add__(self, other: "EstimationSystem") -> "EstimationSystem":
        return EstimationSystem(self.H + other.H, self.g + other.g, self.active)

    def normal_matrix(self, real: bool = True) -> sp.csr_matrix:
        C = self.H.shape[0]
        H = self.H.real if real else self.H
        out = sp.bmat([[sp.diags(H[i, j]) for j in range(C)] for i in range(C)], format="csr")
        out.sort_indices()
        return out

    def rhs(self, real: bool = True) -> np.ndarray:
        g = self.g.real if real else self.g
        return g.reshape(-1)

    def diagonal(self) -> np.ndarray:
        C = self.H.shape[0]
        return np.concatenate([self.H[i, i] for i in range(C)])

    def mean_abs_diagonal(self) -> float:
        return float(np.mean(np.abs(self.diagonal())))


def accumulate_normal(L: BlockDiagonal, y: np.ndarray, s_dual=None, active: ActiveSet | None = None) -> EstimationSystem:
    """Zero-lag correlations of the virtual sources, summed over sources.

    ``L`` and ``y`` may carry a trailing source axis; ``s_dual`` has the
    shape of ``y`` (rows already restricted to those kept in ``L``).
    """
    R, C = L.structure.shape
    n = L.n
    b = L.blocks if L.batched else L.blocks[..., None]
    yy = np.asarray(y) if s_dual is None else np.asarray(y) + np.asarray(s_dual)
    yy = yy.reshape(R, n, -1) if L.batched else yy.reshape(R, n, 1)
    H = np.zeros((C, C, n), dtype=complex)
    g = np.zeros((C, n), dtype=complex)
    for i in range(C):
        for j in range(C):
            terms = [np.sum(np.conj(b[r, i]) * b[r, j], axis=-1)
                     for r in range(R) if L.structure[r, i] and L.structure[r, j]]
            if terms:
                H[i, j] = pairwise_sum(terms)
        terms = [np.sum(np.conj(b[r, i]) * yy[r], axis=-1) for r in range(R) if L.structure[r, i]]
        if terms:
            g[i] = pairwise_sum(terms)
    return EstimationSystem(H, g, active if active is not None else ActiveSet.all())
