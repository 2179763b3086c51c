"""Differentiable spatial operators on displacement fields.

Conventions: a displacement field lives on the fixed-image grid and pulls
from the source; the warped value at fixed voxel position x is the trilinear
sample of the source at x + u(x) (mm).  Samples outside the source domain
clamp to the border.  Finite differences are central in the interior and
one-sided on faces, in physical units.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .axisops import resize3, resize3_adjoint
from .grids import (
    AffineParams,
    DisplacementField,
    GridMeta,
    InvalidGridError,
    LabelMask,
    NonFiniteDataError,
    Volume,
)

__all__ = [
    "WarpGradients",
    "AffineMagnitude",
    "trilinear_warp",
    "trilinear_warp_vjp",
    "warp",
    "warp_gradients",
    "affine_ddf_array",
    "affine_to_ddf",
    "affine_ddf_vjp",
    "compose",
    "aggregate_summands",
    "aggregate_summand_arrays",
    "summand_dims",
    "random_affine",
    "jacobian_determinant_map",
    "displacement_magnitude_map",
    "gradient_l2norm_map",
]


@dataclass(frozen=True)
class WarpGradients:
    """Reverse-mode sensitivities of a warp for a given output cotangent."""

    d_input: np.ndarray
    d_ddf: np.ndarray


def _sample_coords(src_shape, src_spacing, ddf, out_spacing):
    """Per-axis source voxel coordinates of every fixed-grid sample point.

    When spacings match on an axis the coordinate is computed as
    index + u/spacing so a zero displacement is exactly the identity.
    """
    out_dims = ddf.shape[1:]
    coords = []
    for ax in range(3):
        shape = [1, 1, 1]
        shape[ax] = out_dims[ax]
        idx = np.arange(out_dims[ax], dtype=ddf.dtype).reshape(shape)
        if src_spacing[ax] == out_spacing[ax]:
            q = idx + ddf[ax] / ddf.dtype.type(src_spacing[ax])
        else:
            q = (idx * ddf.dtype.type(out_spacing[ax]) + ddf[ax]) / ddf.dtype.type(src_spacing[ax])
        coords.append(q)
    return coords


def _corner_data(src, coords):
    ix0, ix1, tx = [], [], []
    for ax in range(3):
        n = src.shape[ax]
        f = np.floor(coords[ax])
        t = coords[ax] - f
        f = f.astype(np.int64)
        ix0.append(np.clip(f, 0, n - 1))
        ix1.append(np.clip(f + 1, 0, n - 1))
        tx.append(t)
    return ix0, ix1, tx


def trilinear_warp(src: np.ndarray, ddf: np.ndarray, src_spacing, out_spacing) -> np.ndarray:
    """Trilinear pull-back of a scalar array through a displacement field.

    src: (X, Y, Z) source samples; ddf: (3,) + fixed dims, values in mm.
    """
    out, _ = _warp_impl(src, ddf, src_spacing, out_spacing)
    return out


def trilinear_warp_vjp(src: np.ndarray, ddf: np.ndarray, src_spacing, out_spacing,
                       need_d_input: bool = True):
    """Warp plus a vjp closure mapping an output cotangent to (d_src, d_ddf).

    The source-side gradient needs a scatter-add and is the expensive part;
    pass need_d_input=False to skip it (d_src comes back None).
    """
    out, cache = _warp_impl(src, ddf, src_spacing, out_spacing)
    src_shape = src.shape

    def vjp(g: np.ndarray):
        return _warp_vjp(g, src, cache, src_shape, src_spacing, need_d_input)

    return out, vjp


def _warp_impl(src, ddf, src_spacing, out_spacing):
    if ddf.ndim != 4 or ddf.shape[0] != 3:
        raise InvalidGridError(f"ddf array must be (3, X, Y, Z), got {ddf.shape}")
    if not np.all(np.isfinite(ddf)):
        raise NonFiniteDataError("displacement field contains non-finite values")
    coords = _sample_coords(src.shape, src_spacing, ddf, out_spacing)
    ix0, ix1, tx = _corner_data(src, coords)
    wx0 = [1.0 - t for t in tx]
    out = np.zeros(ddf.shape[1:], dtype=np.result_type(src.dtype, ddf.dtype))
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                v = src[
                    (ix1[0] if a else ix0[0]),
                    (ix1[1] if b else ix0[1]),
                    (ix1[2] if c else ix0[2]),
                ]
                w = (tx[0] if a else wx0[0]) * (tx[1] if b else wx0[1]) * (tx[2] if c else wx0[2])
                out += v * w
    return out, (ix0, ix1, tx)


def _warp_vjp(g, src, cache, src_shape, src_spacing, need_d_input=True):
    ix0, ix1, tx = cache
    wx0 = [1.0 - t for t in tx]
    d_src = np.zeros(src_shape, dtype=g.dtype) if need_d_input else None
    d_ddf = np.zeros((3,) + g.shape, dtype=g.dtype)
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                sel = (
                    (ix1[0] if a else ix0[0]),
                    (ix1[1] if b else ix0[1]),
                    (ix1[2] if c else ix0[2]),
                )
                wx = tx[0] if a else wx0[0]
                wy = tx[1] if b else wx0[1]
                wz = tx[2] if c else wx0[2]
                if need_d_input:
                    np.add.at(d_src, sel, g * (wx * wy * wz))
                v = src[sel]
                gv = g * v
                # d/dt of (1-t) is -1, of t is +1; divide by spacing for mm units
                d_ddf[0] += gv * ((1.0 if a else -1.0) * wy * wz)
                d_ddf[1] += gv * (wx * (1.0 if b else -1.0) * wz)
                d_ddf[2] += gv * (wx * wy * (1.0 if c else -1.0))
    for ax in range(3):
        d_ddf[ax] /= g.dtype.type(src_spacing[ax])
    return d_src, d_ddf


def warp(source: Volume | LabelMask, ddf: DisplacementField):
    """Warp a volume or label onto the fixed grid; returns the same kind.

    Label outputs are clipped to [0, 1]; trilinear weights are convex so any
    excursion is float roundoff only.
    """
    out = trilinear_warp(source.data, ddf.data, source.meta.spacing, ddf.meta.spacing)
    if isinstance(source, LabelMask):
        return LabelMask(ddf.meta, np.clip(out, 0.0, 1.0))
    return Volume(ddf.meta, out)


def warp_gradients(source: Volume | LabelMask, ddf: DisplacementField, upstream: np.ndarray) -> WarpGradients:
    """Sensitivities of warp(source, ddf) for a cotangent on the output."""
    _, vjp = trilinear_warp_vjp(
        source.data.astype(np.float64),
        ddf.data.astype(np.float64),
        source.meta.spacing,
        ddf.meta.spacing,
    )
    d_src, d_ddf = vjp(np.asarray(upstream, dtype=np.float64))
    return WarpGradients(d_input=d_src, d_ddf=d_ddf)


def _position_grid(meta: GridMeta, dtype=np.float64) -> np.ndarray:
    """(3, X, Y, Z) physical voxel positions in mm."""
    axes = [np.arange(n, dtype=dtype) * s for n, s in zip(meta.dims, meta.spacing)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz])


def affine_ddf_array(params: AffineParams, meta: GridMeta, dtype=np.float64) -> np.ndarray:
    """Displacement samples u(x) = A x + t - x on the grid."""
    pos = _position_grid(meta, dtype)
    rel = np.asarray(params.matrix, dtype=dtype) - np.eye(3, dtype=dtype)
    out = np.tensordot(rel, pos, axes=([1], [0]))
    return out + np.asarray(params.translation, dtype=dtype).reshape(3, 1, 1, 1)


def affine_to_ddf(params: AffineParams, meta: GridMeta) -> DisplacementField:
    return DisplacementField(meta, affine_ddf_array(params, meta).astype(np.float32))


def affine_ddf_vjp(grad: np.ndarray, meta: GridMeta) -> np.ndarray:
    """Cotangent on an affine-generated field mapped to the 12 parameters.

    Returns gradients ordered as the row-major 3x3 matrix then translation,
    matching :meth:`AffineParams.from_flat`.
    """
    pos = _position_grid(meta, grad.dtype)
    d_a = np.tensordot(grad, pos, axes=([1, 2, 3], [1, 2, 3]))
    d_t = grad.sum(axis=(1, 2, 3))
    return np.concatenate([d_a.reshape(9), d_t])


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Resampling composition u(x) = u_in(x) + u_out(x + u_in(x))."""
    if outer.meta != inner.meta:
        raise InvalidGridError("compose requires identical grids")
    spacing = outer.meta.spacing
    parts = [
        trilinear_warp(outer.data[c], inner.data, spacing, spacing) for c in range(3)
    ]
    return DisplacementField(outer.meta, np.stack(parts) + inner.data)


def summand_dims(full_dims: tuple[int, int, int], level: int) -> tuple[int, int, int]:
    return tuple(-(-d // (2**level)) for d in full_dims)


def aggregate_summand_arrays(summands: dict[int, np.ndarray], full_dims) -> np.ndarray:
    """Sum per-level displacement arrays after trilinear upsampling to full_dims.

    Arrays may carry leading batch/channel axes; the trailing three axes of
    the level-k entry must equal ceil(full_dims / 2**k).
    """
    if not summands:
        raise InvalidGridError("summand set is empty")
    total = None
    for level in sorted(summands):
        arr = summands[level]
        expect = summand_dims(tuple(full_dims), level)
        if tuple(arr.shape[-3:]) != expect:
            raise InvalidGridError(
                f"summand at level {level} has dims {arr.shape[-3:]}, expected {expect}"
            )
        up = resize3(arr, tuple(full_dims))
        total = up if total is None else total + up
    return total


def aggregate_summands(summands: dict[int, DisplacementField], full_meta: GridMeta) -> DisplacementField:
    """Aggregate displacement summands at resolution levels into one field."""
    arrays = {lvl: df.data for lvl, df in summands.items()}
    out = aggregate_summand_arrays(arrays, full_meta.dims)
    return DisplacementField(full_meta, out)


@dataclass(frozen=True)
class AffineMagnitude:
    """Bounds of the random augmentation affine.

    Rotation angle (degrees), per-axis log scale, symmetric shear entries,
    and translation as a fraction of the physical extent.
    """

    rotation_deg: float = 10.0
    log_scale: float = 0.1
    shear: float = 0.05
    translation_frac: float = 0.05

    def scaled(self, factor: float) -> "AffineMagnitude":
        return replace(
            self,
            rotation_deg=self.rotation_deg * factor,
            log_scale=self.log_scale * factor,
            shear=self.shear * factor,
            translation_frac=self.translation_frac * factor,
        )


def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        return np.eye(3)
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _expm_symmetric(s: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(s)
    return (vecs * np.exp(vals)) @ vecs.T


def random_affine(meta: GridMeta, rng: np.random.Generator, magnitude: AffineMagnitude) -> AffineParams:
    """Draw an orientation-preserving random affine about the grid centre.

    A = R exp(S) with R a rotation and S symmetric, so det(A) > 0 for any
    draw.  Magnitude 0 returns the identity.
    """
    axis = rng.standard_normal(3)
    angle = np.deg2rad(rng.uniform(-magnitude.rotation_deg, magnitude.rotation_deg))
    log_scales = rng.uniform(-magnitude.log_scale, magnitude.log_scale, size=3)
    shears = rng.uniform(-magnitude.shear, magnitude.shear, size=3)
    extent = np.asarray(meta.extent_mm)
    t_draw = rng.uniform(-magnitude.translation_frac, magnitude.translation_frac, size=3) * extent

    r = _rotation_matrix(axis, angle)
    s = np.diag(log_scales)
    s[0, 1] = s[1, 0] = shears[0]
    s[0, 2] = s[2, 0] = shears[1]
    s[1, 2] = s[2, 1] = shears[2]
    a = r @ _expm_symmetric(s)

    center = (np.asarray(meta.dims, dtype=np.float64) - 1.0) * np.asarray(meta.spacing) / 2.0
    t = center - a @ center + t_draw
    return AffineParams(a, t)


def _displacement_jacobian(ddf: DisplacementField) -> np.ndarray:
    """(3, 3, X, Y, Z) array of du_c/dx_d in physical units."""
    if any(d < 3 for d in ddf.meta.dims):
        raise InvalidGridError("jacobian stencils require dims >= 3 per axis")
    u = ddf.data.astype(np.float64)
    rows = []
    for c in range(3):
        rows.append(np.stack(np.gradient(u[c], *ddf.meta.spacing)))
    return np.stack(rows)


def _det3(j: np.ndarray) -> np.ndarray:
    return (
        j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
        - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
        + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0])
    )


def jacobian_determinant_map(ddf: DisplacementField) -> Volume:
    """Per-voxel det(I + du/dx); values <= 0 mark folding deformation."""
    j = _displacement_jacobian(ddf)
    for ax in range(3):
        j[ax, ax] += 1.0
    return Volume(ddf.meta, _det3(j).astype(np.float32))


def displacement_magnitude_map(ddf: DisplacementField) -> Volume:
    """Per-voxel Euclidean norm of the displacement in mm."""
    u = ddf.data.astype(np.float64)
    return Volume(ddf.meta, np.sqrt((u**2).sum(axis=0)).astype(np.float32))


def gradient_l2norm_map(ddf: DisplacementField) -> Volume:
    """Per-voxel Frobenius norm of the displacement Jacobian."""
    j = _displacement_jacobian(ddf)
    return Volume(ddf.meta, np.sqrt((j**2).sum(axis=(0, 1))).astype(np.float32))
