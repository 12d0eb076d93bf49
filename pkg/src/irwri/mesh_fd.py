"""Cartesian grid, PML stretching and sparse finite-difference operators.

Unknowns are ordered with x fast and z slow: a field ``f`` of shape
``(nz, nx)`` maps to the vector ``f.ravel()`` and node ``(iz, ix)`` has
index ``iz * nx + ix``.  Lengths are in km, velocities in km/s and angular
frequencies in rad/s.

First derivatives come in two staggered flavours:

* ``"half"`` maps nodes to half nodes, ``(u[i] - u[i-1]) / h`` with a zero
  ghost value below index 0;
* ``"node"`` maps half nodes back to nodes, ``(v[i+1] - v[i]) / h`` with a
  zero ghost value past the last index.

Their product ``node @ half`` is the usual 3-point second derivative, so the
second-order wave operator is an exact composition of first-order ones.  The
zero ghost row above ``iz = 0`` doubles as the pressure-release (free surface)
boundary when ``free_surface_top`` is set.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.sparse as sp

AXES = ("x", "z")
STAGGERS = ("half", "node")


class GridError(ValueError):
    """Rejected grid or operator configuration."""


@dataclass(frozen=True)
class Grid:
    nx: int
    nz: int
    dx: float
    dz: float
    pml_width: int = 10
    free_surface_top: bool = False

    def __post_init__(self):
        if self.nx < 3 or self.nz < 3:
            raise GridError(f"grid needs at least 3 cells per axis, got {self.nx}x{self.nz}")
        if not (self.dx > 0 and self.dz > 0):
            raise GridError(f"grid spacing must be positive, got dx={self.dx}, dz={self.dz}")
        if self.pml_width < 0 or 2 * self.pml_width >= min(self.nx, self.nz):
            raise GridError(f"pml_width={self.pml_width} does not fit a {self.nx}x{self.nz} grid")

    @property
    def n(self) -> int:
        return self.nx * self.nz

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nz, self.nx)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.nx) * self.dx

    @property
    def z(self) -> np.ndarray:
        return np.arange(self.nz) * self.dz

    def interior_slices(self) -> tuple[slice, slice]:
        """(z, x) slices of the region not covered by absorbing layers."""
        w = self.pml_width
        ztop = 0 if self.free_surface_top else w
        return slice(ztop, self.nz - w), slice(w, self.nx - w)

    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[self.interior_slices()] = True
        return mask

    def index(self, iz, ix):
        return np.asarray(iz) * self.nx + np.asarray(ix)

    def nearest_node(self, x, z) -> tuple[np.ndarray, np.ndarray]:
        ix = np.rint(np.asarray(x, dtype=float) / self.dx).astype(int)
        iz = np.rint(np.asarray(z, dtype=float) / self.dz).astype(int)
        return iz, ix


@dataclass(frozen=True)
class PmlProfile:
    """Damping ``d`` at nodes and half nodes for each axis, at frequency ``omega``.

    The complex stretch ``1 + i d / omega`` has modulus 1 in the interior and
    above 1 inside the layers; derivative rows are divided by it.
    """

    omega: float
    damping_x_node: np.ndarray
    damping_x_half: np.ndarray
    damping_z_node: np.ndarray
    damping_z_half: np.ndarray

    def stretch(self, axis: str, stagger: str) -> np.ndarray:
        d = getattr(self, f"damping_{axis}_{stagger}")
        return 1.0 + 1j * d / self.omega


def _layer_depth(positions: np.ndarray, n: int, width_lo: int, width_hi: int) -> np.ndarray:
    # depth into the absorbing layer, in cells, at fractional grid positions
    lo = np.where(width_lo > 0, np.maximum(width_lo - positions, 0.0), 0.0)
    hi = np.where(width_hi > 0, np.maximum(positions - (n - 1 - width_hi), 0.0), 0.0)
    return lo + hi


def build_pml(grid: Grid, omega: float, velocity: float, reflection: float = 1e-3) -> PmlProfile:
    """Quadratic damping ``d0 (l/L)^2`` with ``d0 = 3 v ln(1/R) / (2 L)``."""
    if omega <= 0:
        raise GridError("PML needs a positive angular frequency")
    w = grid.pml_width
    if w == 0:
        zero = lambda k: np.zeros(k)  # noqa: E731
        return PmlProfile(omega, zero(grid.nx), zero(grid.nx), zero(grid.nz), zero(grid.nz))

    def profile(n, h, w_lo, w_hi, offset):
        pos = np.arange(n) + offset
        depth = _layer_depth(pos, n, w_lo, w_hi)
        length = w * h
        d0 = 3.0 * velocity * math.log(1.0 / reflection) / (2.0 * length)
        return d0 * (depth * h / length) ** 2

    wz_top = 0 if grid.free_surface_top else w
    return PmlProfile(
        omega=omega,
        damping_x_node=profile(grid.nx, grid.dx, w, w, 0.0),
        damping_x_half=profile(grid.nx, grid.dx, w, w, -0.5),
        damping_z_node=profile(grid.nz, grid.dz, wz_top, w, 0.0),
        damping_z_half=profile(grid.nz, grid.dz, wz_top, w, -0.5),
    )


def no_pml(grid: Grid, omega: float = 1.0) -> PmlProfile:
    return PmlProfile(omega, np.zeros(grid.nx), np.zeros(grid.nx), np.zeros(grid.nz), np.zeros(grid.nz))


def _first_derivative_1d(n: int, h: float, stagger: str, stretch: np.ndarray | None) -> sp.csr_matrix:
    e = np.ones(n)
    if stagger == "half":
        d = sp.diags([e, -e[1:]], [0, -1], shape=(n, n))
    elif stagger == "node":
        d = sp.diags([-e, e[1:]], [0, 1], shape=(n, n))
    else:
        raise GridError(f"unknown stagger {stagger!r}")
    d = d / h
    if stretch is not None:
        d = sp.diags(1.0 / stretch) @ d
    return sp.csr_matrix(d)


def _embed(grid: Grid, axis: str, op_1d: sp.spmatrix) -> sp.csr_matrix:
    if axis == "x":
        out = sp.kron(sp.identity(grid.nz), op_1d, format="csr")
    else:
        out = sp.kron(op_1d, sp.identity(grid.nx), format="csr")
    out.eliminate_zeros()
    out.sort_indices()
    return out


def build_first_derivative(grid: Grid, axis: str, pml: PmlProfile | None = None,
                           stagger: str = "half") -> sp.csr_matrix:
    """Staggered first derivative along ``axis`` as an ``n x n`` sparse matrix."""
    if axis not in AXES:
        raise GridError(f"axis must be 'x' or 'z', got {axis!r}")
    n, h = (grid.nx, grid.dx) if axis == "x" else (grid.nz, grid.dz)
    stretch = None if pml is None else pml.stretch(axis, stagger)
    d = _first_derivative_1d(n, h, stagger, stretch)
    if pml is None:
        d = d.astype(float)
    return _embed(grid, axis, d)


def build_second_derivative(grid: Grid, axis: str, pml: PmlProfile | None = None) -> sp.csr_matrix:
    """``d/daxis (d/daxis)`` as the product of the node and half-node derivatives."""
    node = build_first_derivative(grid, axis, pml, "node")
    half = build_first_derivative(grid, axis, pml, "half")
    out = sp.csr_matrix(node @ half)
    out.eliminate_zeros()
    out.sort_indices()
    return out


def build_tv_gradient(grid: Grid) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Real forward differences with a replicated (Neumann) last row/column."""

    def forward(n, h):
        e = np.ones(n)
        d = sp.lil_matrix(sp.diags([-e, e[1:]], [0, 1], shape=(n, n)))
        d[n - 1, n - 1] = 0.0
        return sp.csr_matrix(d) / h

    gx = _embed(grid, "x", forward(grid.nx, grid.dx))
    gz = _embed(grid, "z", forward(grid.nz, grid.dz))
    return gx, gz


@dataclass(frozen=True)
class FDOperators:
    """All derivative matrices for one grid and one PML profile."""

    grid: Grid
    pml: PmlProfile
    dx_half: sp.csr_matrix
    dx_node: sp.csr_matrix
    dz_half: sp.csr_matrix
    dz_node: sp.csr_matrix
    dxx: sp.csr_matrix
    dzz: sp.csr_matrix

    @property
    def omega(self) -> float:
        return self.pml.omega


def fd_operators(grid: Grid, pml: PmlProfile) -> FDOperators:
    return FDOperators(
        grid=grid,
        pml=pml,
        dx_half=build_first_derivative(grid, "x", pml, "half"),
        dx_node=build_first_derivative(grid, "x", pml, "node"),
        dz_half=build_first_derivative(grid, "z", pml, "half"),
        dz_node=build_first_derivative(grid, "z", pml, "node"),
        dxx=build_second_derivative(grid, "x", pml),
        dzz=build_second_derivative(grid, "z", pml),
    )


# --- optional nine-point (average-derivative + mass-lumping) path -----------

def _nine_point_phase_ratio(params, kh, theta):
    alpha, d, e = params
    c = 1.0 - 4.0 * d - 4.0 * e
    a = kh * np.cos(theta)
    b = kh * np.sin(theta)
    stiff = 4.0 * (np.sin(a / 2) ** 2 * (alpha + (1 - alpha) * np.cos(b))
                   + np.sin(b / 2) ** 2 * (alpha + (1 - alpha) * np.cos(a)))
    mass = c + 2.0 * d * (np.cos(a) + np.cos(b)) + 4.0 * e * np.cos(a) * np.cos(b)
    return np.sqrt(stiff / (kh ** 2 * mass))


@functools.lru_cache(maxsize=None)
def nine_point_weights(min_ppw: float = 4.0, max_ppw: float = 40.0) -> tuple[float, float, float]:
    """Fit (alpha, d, e) minimising the phase-velocity error over ``[min_ppw, max_ppw]``.

    ``alpha`` weights the centre line of the transverse average applied to the
    second derivatives; ``d`` and ``e`` are the edge and corner weights of the
    lumped mass term (centre weight ``1 - 4d - 4e``).
    """
    g = np.linspace(1.0 / max_ppw, 1.0 / min_ppw, 40)
    theta = np.linspace(0.0, np.pi / 4, 12)
    kh, th = np.meshgrid(2 * np.pi * g, theta)
    res = scipy.optimize.least_squares(
        lambda p: (_nine_point_phase_ratio(p, kh, th) - 1.0).ravel(),
        x0=[0.5, 0.1, 0.0],
    )
    return tuple(float(v) for v in res.x)


def nine_point_phase_error(weights, ppw: float, theta: float) -> float:
    return float(_nine_point_phase_ratio(weights, 2 * np.pi / ppw, theta) - 1.0)


def _shift(n: int, k: int) -> sp.csr_matrix:
    return sp.csr_matrix(sp.eye(n, k=k))


def nine_point_operators(grid: Grid, pml: PmlProfile, weights=None):
    """Return ``(dxx9, dzz9, mass)`` for the optional high-accuracy stencil.

    ``dxx9`` is the PML second derivative in x averaged over the three
    neighbouring z lines (and conversely for ``dzz9``); ``mass`` spreads the
    ``omega^2 m`` term over the 9-point neighbourhood.
    """
    alpha, d, e = weights if weights is not None else nine_point_weights()
    c = 1.0 - 4.0 * d - 4.0 * e
    ix, iz = sp.identity(grid.nx), sp.identity(grid.nz)
    sx = _shift(grid.nx, 1) + _shift(grid.nx, -1)
    sz = _shift(grid.nz, 1) + _shift(grid.nz, -1)
    avg_z = sp.kron(alpha * iz + 0.5 * (1 - alpha) * sz, ix, format="csr")
    avg_x = sp.kron(iz, alpha * ix + 0.5 * (1 - alpha) * sx, format="csr")
    mass = (c * sp.identity(grid.n) + d * (sp.kron(iz, sx) + sp.kron(sz, ix))
            + e * sp.kron(sz, sx))
    dxx = build_second_derivative(grid, "x", pml)
    dzz = build_second_derivative(grid, "z", pml)
    return sp.csr_matrix(dxx @ avg_z), sp.csr_matrix(dzz @ avg_x), sp.csr_matrix(mass)
