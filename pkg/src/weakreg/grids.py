"""Dense 3D grid containers and basic per-volume operations.

All arrays are indexed ``[x, y, z]`` (vector fields ``[component, x, y, z]``)
and all physical quantities are millimetres.  The on-disk layout (x-fastest,
channel-major) lives in :mod:`weakreg.volio`; in memory everything is a
shaped numpy array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridMeta",
    "Volume",
    "LabelMask",
    "DisplacementField",
    "AffineParams",
    "InvalidGridError",
    "NonFiniteDataError",
    "EmptyLabelError",
    "normalize_intensity",
    "centroid",
]

# Population std below this is treated as a constant image.
_SIGMA_FLOOR = 1e-12


class InvalidGridError(ValueError):
    """Grid metadata or payload shape violates an invariant."""


class NonFiniteDataError(ValueError):
    """Payload contains NaN or infinity."""


class EmptyLabelError(ValueError):
    """Operation requires a label with positive total mass."""


@dataclass(frozen=True)
class GridMeta:
    """Voxel counts and physical spacing (mm) of a regular 3D grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (0.8, 0.8, 0.8)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise InvalidGridError(f"dims must be three counts >= 1, got {self.dims}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise InvalidGridError(f"spacing must be three positive mm values, got {self.spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical size dims * spacing per axis."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if out is arr:
        out = arr.copy()
    out.setflags(write=False)
    return out


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteDataError(f"{what} contains {bad} non-finite value(s)")


@dataclass(frozen=True)
class Volume:
    """Scalar intensity grid. ``data`` has shape ``meta.dims``, float32."""

    meta: GridMeta
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.meta.dims:
            raise InvalidGridError(f"volume data shape {data.shape} != dims {self.meta.dims}")
        _check_finite(data, "volume data")
        object.__setattr__(self, "data", _freeze(data))


@dataclass(frozen=True)
class LabelMask:
    """Per-voxel foreground probability in [0, 1] on a volume grid."""

    meta: GridMeta
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.meta.dims:
            raise InvalidGridError(f"label data shape {data.shape} != dims {self.meta.dims}")
        _check_finite(data, "label data")
        if data.size and (float(data.min()) < 0.0 or float(data.max()) > 1.0):
            raise InvalidGridError(
                f"label values outside [0, 1]: min={data.min():.6g} max={data.max():.6g}"
            )
        object.__setattr__(self, "data", _freeze(data))


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement vectors in mm on the fixed-image grid.

    ``data`` has shape ``(3,) + meta.dims``; component c holds the
    displacement along axis c.
    """

    meta: GridMeta
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != (3,) + self.meta.dims:
            raise InvalidGridError(
                f"displacement data shape {data.shape} != (3,)+{self.meta.dims}"
            )
        _check_finite(data, "displacement data")
        object.__setattr__(self, "data", _freeze(data))


@dataclass(frozen=True)
class AffineParams:
    """Affine map x -> A @ x + t on physical (mm) coordinates.

    ``matrix`` is the 3x3 linear part (row-major), ``translation`` is mm.
    ``det(matrix) > 0`` is required for augmentation draws but not enforced
    here: a network may predict arbitrary affines mid-training.
    """

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if m.shape != (3, 3) or t.shape != (3,):
            raise InvalidGridError(f"affine shapes {m.shape}, {t.shape} != (3,3), (3,)")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(t))):
            raise NonFiniteDataError("affine parameters contain non-finite values")
        m.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_flat(cls, values) -> "AffineParams":
        """Build from 12 values: 9 row-major matrix entries then translation."""
        v = np.asarray(values, dtype=np.float64).reshape(12)
        return cls(v[:9].reshape(3, 3), v[9:])

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.matrix.reshape(9), self.translation])

    def compose(self, inner: "AffineParams") -> "AffineParams":
        """Return the map x -> self(inner(x))."""
        return AffineParams(
            self.matrix @ inner.matrix,
            self.matrix @ inner.translation + self.translation,
        )


def normalize_intensity(v: Volume) -> Volume:
    """Shift/scale to zero mean and unit population standard deviation.

    Constant volumes map to all zeros (std floored at 1e-12).
    """
    if v.meta.n_voxels < 2:
        raise InvalidGridError("normalization needs at least 2 voxels")
    data = v.data.astype(np.float64)
    mean = data.mean()
    sigma = data.std()
    if sigma < _SIGMA_FLOOR:
        out = np.zeros_like(data)
    else:
        out = (data - mean) / sigma
    return Volume(v.meta, out.astype(np.float32))


def centroid(l: LabelMask) -> np.ndarray:
    """Probability-weighted centre of mass in physical mm coordinates."""
    data = l.data.astype(np.float64)
    total = data.sum()
    if total <= 0.0:
        raise EmptyLabelError("centroid of an all-zero label is undefined")
    out = np.empty(3)
    for ax in range(3):
        coords = np.arange(l.meta.dims[ax], dtype=np.float64) * l.meta.spacing[ax]
        mass = data.sum(axis=tuple(a for a in range(3) if a != ax))
        out[ax] = (mass * coords).sum() / total
    return out
