"""Physical and optimisation-space VTI parameter fields.

The inversion works on ``m = (1/v0^2, 1 + 2 eps, sqrt(1 + 2 delta))`` with
``v0`` in km/s, stacked cell-fast and class-slow into one real 3n vector.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

CLASSES = ("v0", "eps", "delta")
CLASS_UNITS = {"v0": "km/s", "eps": "1", "delta": "1"}


class DomainError(ValueError):
    """Parameter values outside the domain of a conversion."""


def _as_field(a, n=None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if n is not None and a.size != n:
        raise DomainError(f"expected {n} cells, got {a.size}")
    return a


@dataclass(frozen=True)
class PhysicalModel:
    v0: np.ndarray
    epsilon: np.ndarray
    delta: np.ndarray
    buoyancy: np.ndarray | None = None

    def __post_init__(self):
        for name in ("v0", "epsilon", "delta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.v0.shape == self.epsilon.shape == self.delta.shape):
            raise DomainError("v0, epsilon and delta must share one shape")
        if self.buoyancy is None:
            object.__setattr__(self, "buoyancy", np.ones_like(self.v0))
        if np.any(self.v0 <= 0):
            raise DomainError("v0 must be positive")
        if np.any(1 + 2 * self.epsilon <= 0):
            raise DomainError("1 + 2 epsilon must be positive")
        if np.any(1 + 2 * self.delta <= 0):
            raise DomainError("1 + 2 delta must be positive")

    @property
    def shape(self):
        return self.v0.shape

    @classmethod
    def homogeneous(cls, shape, v0, epsilon=0.0, delta=0.0) -> "PhysicalModel":
        return cls(np.full(shape, float(v0)), np.full(shape, float(epsilon)), np.full(shape, float(delta)))

    def field(self, name: str) -> np.ndarray:
        return {"v0": self.v0, "eps": self.epsilon, "delta": self.delta}[name]


@dataclass(frozen=True)
class ActiveSet:
    v0: bool = True
    eps: bool = False
    delta: bool = False

    def __post_init__(self):
        if not (self.v0 or self.eps or self.delta):
            raise ValueError("at least one parameter class must be active")

    @property
    def mask(self) -> tuple[bool, bool, bool]:
        return (self.v0, self.eps, self.delta)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(i for i, a in enumerate(self.mask) if a)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(CLASSES[i] for i in self.classes)

    @property
    def count(self) -> int:
        return len(self.classes)

    @classmethod
    def from_names(cls, names) -> "ActiveSet":
        names = set(names)
        unknown = names - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown parameter classes {sorted(unknown)}")
        return cls(v0="v0" in names, eps="eps" in names, delta="delta" in names)

    @classmethod
    def all(cls) -> "ActiveSet":
        return cls(True, True, True)


@dataclass(frozen=True)
class OptimizationModel:
    """Stacked optimisation parameters; ``values[k*n:(k+1)*n]`` is class ``k``."""

    values: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "shape", tuple(self.shape))
        if v.size != 3 * self.n:
            raise DomainError(f"expected {3 * self.n} values, got {v.size}")

    @property
    def n(self) -> int:
        return int(self.shape[0] * self.shape[1])

    def block(self, k: int) -> np.ndarray:
        return self.values[k * self.n:(k + 1) * self.n]

    @property
    def m_v0(self):
        return self.block(0)

    @property
    def m_eps(self):
        return self.block(1)

    @property
    def m_delta(self):
        return self.block(2)

    @classmethod
    def from_blocks(cls, m_v0, m_eps, m_delta, shape) -> "OptimizationModel":
        return cls(np.concatenate([np.ravel(m_v0), np.ravel(m_eps), np.ravel(m_delta)]), shape)

    def active_vector(self, active: ActiveSet) -> np.ndarray:
        return np.concatenate([self.block(k) for k in active.classes])

    def with_active(self, x: np.ndarray, active: ActiveSet) -> "OptimizationModel":
        """Copy with the active classes replaced by the stacked vector ``x``."""
        x = np.asarray(x, dtype=float)
        if x.size != active.count * self.n:
            raise DomainError("active vector has the wrong length")
        v = self.values.copy()
        for j, k in enumerate(active.classes):
            v[k * self.n:(k + 1) * self.n] = x[j * self.n:(j + 1) * self.n]
        return OptimizationModel(v, self.shape)

    def is_positive(self) -> bool:
        return bool(np.all(self.values > 0))


def to_optimization(pm: PhysicalModel) -> OptimizationModel:
    if np.any(1 + 2 * pm.delta <= 0):
        raise DomainError("1 + 2 delta must be positive")
    return OptimizationModel.from_blocks(
        1.0 / pm.v0 ** 2, 1.0 + 2.0 * pm.epsilon, np.sqrt(1.0 + 2.0 * pm.delta), pm.shape)


def from_optimization(m: OptimizationModel) -> PhysicalModel:
    if not m.is_positive():
        raise DomainError("optimisation parameters must be positive")
    shape = m.shape
    return PhysicalModel(
        v0=(1.0 / np.sqrt(m.m_v0)).reshape(shape),
        epsilon=((m.m_eps - 1.0) / 2.0).reshape(shape),
        delta=((m.m_delta ** 2 - 1.0) / 2.0).reshape(shape),
    )


@dataclass(frozen=True)
class StiffnessModel:
    c11: np.ndarray
    c13: np.ndarray
    c33: np.ndarray
    buoyancy: np.ndarray

    def determinant(self) -> np.ndarray:
        return self.c11 * self.c33 - self.c13 ** 2


@dataclass(frozen=True)
class ComplianceModel:
    s11: np.ndarray
    s13: np.ndarray
    s33: np.ndarray
    buoyancy: np.ndarray


def to_stiffness(pm: PhysicalModel) -> StiffnessModel:
    v2 = pm.v0 ** 2
    return StiffnessModel(
        c11=v2 * (1.0 + 2.0 * pm.epsilon),
        c13=v2 * np.sqrt(1.0 + 2.0 * pm.delta),
        c33=v2.copy(),
        buoyancy=np.asarray(pm.buoyancy, dtype=float),
    )


def stiffness_to_compliance(sm: StiffnessModel, rtol: float = 1e-10) -> ComplianceModel:
    det = sm.determinant()
    scale = np.maximum(np.abs(sm.c11 * sm.c33), np.finfo(float).tiny)
    if np.any(np.abs(det) <= rtol * scale):
        raise DomainError("stiffness block is singular (epsilon == delta somewhere)")
    return ComplianceModel(s11=sm.c33 / det, s13=-sm.c13 / det, s33=sm.c11 / det, buoyancy=sm.buoyancy)


def to_compliance(pm: PhysicalModel) -> ComplianceModel:
    return stiffness_to_compliance(to_stiffness(pm))


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape:
            raise ValueError("bounds must share one shape")
        if np.any(lo <= 0) or np.any(hi <= lo):
            raise ValueError("bounds must satisfy 0 < lower < upper")

    def restrict(self, active: ActiveSet, n: int) -> "Bounds":
        take = lambda v: np.concatenate([v[k * n:(k + 1) * n] for k in active.classes])  # noqa: E731
        return Bounds(take(self.lower), take(self.upper))


@dataclass(frozen=True)
class PhysicalRanges:
    v0: tuple[float, float] = (1.4, 6.0)
    eps: tuple[float, float] = (0.0, 0.3)
    delta: tuple[float, float] = (0.0, 0.3)


def make_bounds(n: int, ranges: PhysicalRanges = PhysicalRanges()) -> Bounds:
    """m-space image of per-class physical intervals (1/v^2 reverses the order)."""
    v_lo, v_hi = ranges.v0
    lower = np.concatenate([np.full(n, 1.0 / v_hi ** 2), np.full(n, 1.0 + 2.0 * ranges.eps[0]),
                            np.full(n, np.sqrt(1.0 + 2.0 * ranges.delta[0]))])
    upper = np.concatenate([np.full(n, 1.0 / v_lo ** 2), np.full(n, 1.0 + 2.0 * ranges.eps[1]),
                            np.full(n, np.sqrt(1.0 + 2.0 * ranges.delta[1]))])
    return Bounds(lower, upper)


# --- file I/O ----------------------------------------------------------------

@dataclass
class FieldHeader:
    nx: int
    nz: int
    dx: float
    dz: float
    name: str
    units: str
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"nx = {self.nx}", f"nz = {self.nz}", f"dx = {self.dx!r}", f"dz = {self.dz!r}",
                 f"name = {self.name}", f"units = {self.units}", "dtype = float64-le",
                 "order = z-slow x-fast"]
        lines += [f"{k} = {v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FieldHeader":
        kv = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        core = {"nx", "nz", "dx", "dz", "name", "units", "dtype", "order"}
        return cls(int(kv["nx"]), int(kv["nz"]), float(kv["dx"]), float(kv["dz"]), kv["name"],
                   kv["units"], {k: v for k, v in kv.items() if k not in core})


def write_field(path: str, values: np.ndarray, header: FieldHeader) -> None:
    """Write ``path`` (.bin, float64 little endian) and ``path + '.hdr'``."""
    arr = np.asarray(values, dtype="<f8").reshape(header.nz, header.nx)
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())
    with open(path + ".hdr", "w") as fh:
        fh.write(header.to_text())


def read_field(path: str) -> tuple[np.ndarray, FieldHeader]:
    with open(path + ".hdr") as fh:
        header = FieldHeader.from_text(fh.read())
    arr = np.fromfile(path, dtype="<f8")
    if arr.size != header.nx * header.nz:
        raise OSError(f"{path}: expected {header.nx * header.nz} values, found {arr.size}")
    return arr.reshape(header.nz, header.nx), header


def write_model(directory: str, pm: PhysicalModel, dx: float, dz: float, prefix: str = "") -> list[str]:
    os.makedirs(directory, exist_ok=True)
    nz, nx = pm.shape
    paths = []
    for name in CLASSES:
        path = os.path.join(directory, f"{prefix}{name}.bin")
        write_field(path, pm.field(name), FieldHeader(nx, nz, dx, dz, name, CLASS_UNITS[name]))
        paths.append(path)
    return paths


def read_model(directory: str, prefix: str = "") -> PhysicalModel:
    fields = [read_field(os.path.join(directory, f"{prefix}{name}.bin"))[0] for name in CLASSES]
    return PhysicalModel(*fields)


def write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
