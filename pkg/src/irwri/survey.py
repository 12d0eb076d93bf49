"""Acquisition geometry, sampling operators, noise and data files."""

from __future__ import annotations

import configparser
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .mesh_fd import Grid

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Acquisition:
    sources: np.ndarray  # (n_s, 2) as (x, z) in km
    receivers: np.ndarray  # (n_r, 2)
    kind: str = "surrounding"

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sources, dtype=float))
        r = np.atleast_2d(np.asarray(self.receivers, dtype=float))
        object.__setattr__(self, "sources", s)
        object.__setattr__(self, "receivers", r)
        if s.shape[0] < 1 or r.shape[0] < 1:
            raise GeometryError("need at least one source and one receiver")

    @property
    def n_sources(self) -> int:
        return self.sources.shape[0]

    @property
    def n_receivers(self) -> int:
        return self.receivers.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.ascontiguousarray(self.sources, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.receivers, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def snap_to_nodes(grid: Grid, positions, what: str = "position") -> np.ndarray:
    """Nearest-node flat indices; warns when a position is off the grid nodes."""
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    iz, ix = grid.nearest_node(pos[:, 0], pos[:, 1])
    off = np.hypot(ix * grid.dx - pos[:, 0], iz * grid.dz - pos[:, 1])
    moved = off > 1e-9 * max(grid.dx, grid.dz)
    if np.any(moved):
        log.warning("%d %s(s) snapped to the nearest grid node", int(np.sum(moved)), what)
    zs, xs = grid.interior_slices()
    inside = (iz >= zs.start) & (iz < zs.stop) & (ix >= xs.start) & (ix < xs.stop)
    if not np.all(inside):
        raise GeometryError(f"{what} outside the grid interior")
    return grid.index(iz, ix)


def _perimeter_nodes(grid: Grid, inset: int) -> np.ndarray:
    """(iz, ix) of the rectangle ``inset`` cells inside the interior, clockwise from top-left."""
    zs, xs = grid.interior_slices()
    z0, z1 = zs.start + inset, zs.stop - 1 - inset
    x0, x1 = xs.start + inset, xs.stop - 1 - inset
    if z1 <= z0 or x1 <= x0:
        raise GeometryError("inset leaves no room for a perimeter")
    top = [(z0, x) for x in range(x0, x1)]
    right = [(z, x1) for z in range(z0, z1)]
    bottom = [(z1, x) for x in range(x1, x0, -1)]
    left = [(z, x0) for z in range(z1, z0, -1)]
    return np.array(top + right + bottom + left)


def _spread_on_perimeter(grid: Grid, count: int, inset: int) -> np.ndarray:
    nodes = _perimeter_nodes(grid, inset)
    if count > len(nodes):
        raise GeometryError(f"{count} positions do not fit on a perimeter of {len(nodes)} nodes")
    idx = np.floor(np.arange(count) * len(nodes) / count + 1e-9).astype(int)
    iz, ix = nodes[idx].T
    return np.column_stack([ix * grid.dx, iz * grid.dz])


def perimeter_size(grid: Grid, inset: int = 2) -> int:
    return len(_perimeter_nodes(grid, inset))


def make_surrounding_acquisition(grid: Grid, n_s: int, n_r: int, inset: int = 2) -> Acquisition:
    """Sources and receivers spread evenly around a rectangle enclosing the target."""
    return Acquisition(_spread_on_perimeter(grid, n_s, inset),
                       _spread_on_perimeter(grid, n_r, inset), "surrounding")


def make_surface_acquisition(grid: Grid, source_spacing: float, receiver_spacing: float,
                             source_depth: float, receiver_depth: float,
                             margin: float = 0.0) -> Acquisition:
    """Two horizontal fixed-spread lines across the interior width."""
    zs, xs = grid.interior_slices()
    x_lo = xs.start * grid.dx + margin
    x_hi = (xs.stop - 1) * grid.dx - margin

    def line(spacing, depth):
        if spacing <= 0:
            raise GeometryError("spacing must be positive")
        count = int(math.floor((x_hi - x_lo) / spacing + 1e-9)) + 1
        x = x_lo + spacing * np.arange(count)
        z = zs.start * grid.dz + depth
        if z > (zs.stop - 1) * grid.dz:
            raise GeometryError("line depth is below the interior")
        return np.column_stack([x, np.full(count, z)])

    return Acquisition(line(source_spacing, source_depth), line(receiver_spacing, receiver_depth), "surface")


def build_ptilde(grid: Grid, receivers) -> sp.csr_matrix:
    """``n_r x n`` single-component sampling (one unit entry per row)."""
    idx = snap_to_nodes(grid, receivers, "receiver")
    nr = len(idx)
    return sp.csr_matrix((np.ones(nr), (np.arange(nr), idx)), shape=(nr, grid.n))


def build_P(grid: Grid, receivers) -> sp.csr_matrix:
    """Pressure sampling ``[P~/2, P~/2]`` acting on stacked ``[Ux; Uz]``."""
    pt = build_ptilde(grid, receivers)
    return sp.csr_matrix(sp.hstack([0.5 * pt, 0.5 * pt]))


def point_sources(grid: Grid, positions, amplitude: float = 1.0) -> np.ndarray:
    """Dense ``n x n_s`` matrix of unit point sources on the nearest nodes."""
    idx = snap_to_nodes(grid, positions, "source")
    s = np.zeros((grid.n, len(idx)), dtype=complex)
    s[idx, np.arange(len(idx))] = amplitude
    return s


# --- data sets ---------------------------------------------------------------

@dataclass(frozen=True)
class NoiseRecord:
    seed: int | None = None
    snr_db: float = math.inf
    noise_norms: tuple[float, ...] = ()  # one per frequency

    def batch_norm(self, freq_idx) -> float:
        if not self.noise_norms:
            return 0.0
        return float(math.sqrt(sum(self.noise_norms[i] ** 2 for i in freq_idx)))


@dataclass(frozen=True)
class DataSet:
    values: np.ndarray  # complex, (n_freq, n_s, n_r)
    frequencies: np.ndarray  # Hz
    geometry_digest: str = ""
    noise: NoiseRecord = field(default_factory=NoiseRecord)

    def __post_init__(self):
        v = np.asarray(self.values)
        f = np.asarray(self.frequencies, dtype=float).ravel()
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "frequencies", f)
        if v.ndim != 3 or v.shape[0] != f.size:
            raise ValueError("values must be (n_freq, n_s, n_r) matching the frequency list")
        if not np.all(np.isfinite(v)):
            raise ValueError("data contain non-finite samples")

    def frequency_index(self, f: float) -> int:
        hits = np.flatnonzero(np.isclose(self.frequencies, f, rtol=0, atol=1e-9))
        if hits.size != 1:
            raise KeyError(f"frequency {f} Hz not in dataset")
        return int(hits[0])

    def receiver_matrix(self, f: float) -> np.ndarray:
        """``n_r x n_s`` data block for one frequency."""
        return self.values[self.frequency_index(f)].T

    def noise_norm(self, freqs) -> float:
        return self.noise.batch_norm([self.frequency_index(f) for f in freqs])


def add_noise(data: DataSet, snr_db: float, seed: int) -> DataSet:
    """Complex white Gaussian noise at a global signal-to-noise ratio."""
    if data.values.size == 0:
        raise ValueError("empty dataset")
    if math.isinf(snr_db) and snr_db > 0:
        return data
    rng = np.random.default_rng(seed)
    shape = data.values.shape
    noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    target = np.linalg.norm(data.values) * 10.0 ** (-snr_db / 20.0)
    noise *= target / np.linalg.norm(noise)
    norms = tuple(float(np.linalg.norm(noise[i])) for i in range(shape[0]))
    return replace(data, values=data.values + noise, noise=NoiseRecord(seed, float(snr_db), norms))


def measured_snr_db(clean: DataSet, noisy: DataSet) -> float:
    n = noisy.values - clean.values
    return float(10.0 * np.log10(np.sum(np.abs(clean.values) ** 2) / np.sum(np.abs(n) ** 2)))


def write_dataset(prefix: str, data: DataSet) -> tuple[str, str]:
    """Write ``prefix.bin`` (complex64, little endian) and ``prefix.manifest``."""
    bin_path, man_path = prefix + ".bin", prefix + ".manifest"
    with open(bin_path, "wb") as fh:
        fh.write(np.ascontiguousarray(data.values, dtype="<c8").tobytes())
    cp = configparser.ConfigParser()
    nf, ns, nr = data.values.shape
    cp["data"] = {"n_freq": str(nf), "n_sources": str(ns), "n_receivers": str(nr),
                  "dtype": "complex64-le", "order": "frequency source receiver",
                  "frequencies_hz": " ".join(repr(float(f)) for f in data.frequencies),
                  "geometry_digest": data.geometry_digest}
    cp["noise"] = {"seed": "" if data.noise.seed is None else str(data.noise.seed),
                   "snr_db": repr(data.noise.snr_db),
                   "noise_norms": " ".join(repr(v) for v in data.noise.noise_norms)}
    with open(man_path, "w") as fh:
        cp.write(fh)
    return bin_path, man_path


def read_dataset(prefix: str) -> DataSet:
    cp = configparser.ConfigParser()
    with open(prefix + ".manifest") as fh:
        cp.read_file(fh)
    d, nz = cp["data"], cp["noise"]
    shape = (int(d["n_freq"]), int(d["n_sources"]), int(d["n_receivers"]))
    values = np.fromfile(prefix + ".bin", dtype="<c8")
    if values.size != np.prod(shape):
        raise OSError(f"{prefix}.bin holds {values.size} samples, manifest says {np.prod(shape)}")
    noise = NoiseRecord(
        seed=int(nz["seed"]) if nz["seed"] else None,
        snr_db=float(nz["snr_db"]),
        noise_norms=tuple(float(v) for v in nz["noise_norms"].split()),
    )
    return DataSet(values.reshape(shape).astype(complex),
                   np.array([float(f) for f in d["frequencies_hz"].split()]),
                   d["geometry_digest"], noise)
