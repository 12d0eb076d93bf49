"""Sparse solves, weighted least squares and power iteration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DIRECT_CAP = 200_000
DIRECT_RTOL = 1e-10
CG_RTOL = 1e-8


class SolveError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class LinearSolveReport:
    relative_residual: float
    method: str
    iterations: int = 0
    reused_factorization: bool = False
    refinement_steps: int = 0


def relative_residual(A, X, B) -> float:
    """``||A X - B||_F / ||B||_F`` (0 when ``B`` is zero and so is the residual)."""
    R = A @ X - B
    nb = np.linalg.norm(B)
    nr = np.linalg.norm(R)
    if nb == 0:
        return float(nr)
    return float(nr / nb)


def as_csr(A) -> sp.csr_matrix:
    """Canonical storage: CSR, sorted indices, explicit zeros removed."""
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


class Factorization:
    """LU of a square sparse matrix, reusable across right-hand sides."""

    def __init__(self, A):
        self.A = sp.csc_matrix(A)
        if self.A.shape[0] != self.A.shape[1]:
            raise SolveError(f"matrix must be square, got {self.A.shape}")
        try:
            self._lu = spla.splu(self.A)
        except RuntimeError as exc:
            raise SolveError(f"factorization failed: {exc}") from exc
        self.uses = 0

    @property
    def shape(self):
        return self.A.shape

    def solve(self, B, trans: str = "N") -> np.ndarray:
        """Solve ``A X = B`` (``trans='H'`` for ``A^H X = B``)."""
        B = np.asarray(B)
        dtype = np.result_type(self.A.dtype, B.dtype)
        self.uses += 1
        if dtype != self.A.dtype:
            # splu is typed by its matrix; complex rhs on a real factor is split
            re = self._lu.solve(np.ascontiguousarray(B.real), trans=trans)
            im = self._lu.solve(np.ascontiguousarray(B.imag), trans=trans)
            return re + 1j * im
        return self._lu.solve(np.ascontiguousarray(B), trans=trans)


def solve(A, B, factorization: Factorization | None = None, direct_cap: int = DIRECT_CAP,
          cg_rtol: float = CG_RTOL, cg_maxiter: int | None = None,
          refine: int = 2) -> tuple[np.ndarray, LinearSolveReport]:
    """Solve ``A X = B`` for one or many right-hand sides.

    Systems up to ``direct_cap`` unknowns are factorised (or use the given
    factorisation); larger ones run CG per column and must be Hermitian
    positive definite.
    """
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise SolveError(f"matrix must be square, got {A.shape}")
    B = np.asarray(B)
    if factorization is not None or n <= direct_cap:
        reused = factorization is not None and factorization.uses > 0
        fac = factorization if factorization is not None else Factorization(A)
        X = fac.solve(B)
        steps = 0
        res = relative_residual(A, X, B)
        while res > DIRECT_RTOL and steps < refine and np.isfinite(res):
            X = X + fac.solve(B - A @ X)
            steps += 1
            res = relative_residual(A, X, B)
        report = LinearSolveReport(res, "direct", 0, reused, steps)
        if not np.isfinite(res) or res > DIRECT_RTOL:
            raise SolveError(f"direct solve residual {res:.3e} exceeds {DIRECT_RTOL:g}", report)
        return X, report
    return _cg_solve(A, B, cg_rtol, cg_maxiter)


def _cg_solve(A, B, rtol, maxiter):
    cols = B.reshape(B.shape[0], -1)
    X = np.zeros(cols.shape, dtype=np.result_type(A.dtype, B.dtype))
    total = 0
    for j in range(cols.shape[1]):
        count = [0]

        def cb(_xk):
            count[0] += 1

        x, info = spla.cg(A, cols[:, j], rtol=rtol, maxiter=maxiter, callback=cb)
        total += count[0]
        X[:, j] = x
        if info != 0:
            res = relative_residual(A, X[:, : j + 1], cols[:, : j + 1])
            raise SolveError(f"CG did not converge on column {j}",
                             LinearSolveReport(res, "cg", total))
    X = X.reshape(B.shape)
    return X, LinearSolveReport(relative_residual(A, X, B), "cg", total)


def normal_matrix(blocks, weights=None, real: bool = False) -> sp.csr_matrix:
    """``sum_i G_i^H W_i G_i`` with scalar or per-row weights ``W_i``."""
    weights = weights if weights is not None else [1.0] * len(blocks)
    out = None
    for G, w in zip(blocks, weights):
        G = sp.csr_matrix(G)
        WG = sp.diags(np.broadcast_to(np.asarray(w, dtype=float), (G.shape[0],))) @ G
        term = G.conj().T @ WG
        out = term if out is None else out + term
    if real:
        out = out.real
    return as_csr(out)


def weighted_least_squares(blocks, rhs, weights=None, real: bool = False):
    """Minimise ``sum_i || W_i^(1/2) (G_i x - b_i) ||^2`` through its normal equations.

    ``real=True`` restricts ``x`` to real values (the real part of the complex
    normal system).  Returns ``(x, report)``.
    """
    if len(blocks) != len(rhs):
        raise SolveError("blocks and right-hand sides differ in count")
    weights = weights if weights is not None else [1.0] * len(blocks)
    if any(np.any(np.asarray(w) < 0) for w in weights):
        raise SolveError("weights must be nonnegative")
    N = normal_matrix(blocks, weights, real)
    r = 0
    for G, b, w in zip(blocks, rhs, weights):
        b = np.asarray(b)
        w = np.asarray(w, dtype=float)
        wb = (w[:, None] * b if b.ndim == 2 else w * b) if w.ndim else w * b
        r = r + sp.csr_matrix(G).conj().T @ wb
    if real:
        r = np.real(r)
    try:
        x, report = solve(N, r)
    except SolveError as exc:
        raise SolveError(f"weighted least-squares system is rank deficient: {exc}", exc.report) from exc
    return x, report


@dataclass(frozen=True)
class EigenEstimate:
    value: float
    converged: bool
    iterations: int


def max_eigenvalue(matvec, n: int, dtype=complex, tol: float = 1e-4, maxiter: int = 200,
                   seed: int = 1234) -> EigenEstimate:
    """Largest eigenvalue of a Hermitian PSD operator by power iteration."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    if np.issubdtype(np.dtype(dtype), np.complexfloating):
        x = x + 1j * rng.standard_normal(n)
    x = x / np.linalg.norm(x)
    lam = 0.0
    for it in range(1, maxiter + 1):
        y = matvec(x)
        new = float(np.real(np.vdot(x, y)))
        ny = np.linalg.norm(y)
        if ny == 0:
            return EigenEstimate(0.0, True, it)
        x = y / ny
        if it > 1 and abs(new - lam) <= tol * abs(new):
            return EigenEstimate(new, True, it)
        lam = new
    log.warning("power iteration stopped after %d iterations without converging", maxiter)
    return EigenEstimate(lam, False, maxiter)
