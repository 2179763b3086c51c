"""Separable per-axis linear operators.

Trilinear resampling between grid sizes and Gaussian smoothing along an
axis are both small dense matrices acting on that axis.  Representing them
explicitly keeps application a plain GEMM and makes every adjoint literally
the transposed matrix.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = ["lerp_matrix", "gaussian_kernel", "gaussian_matrix", "apply_axis", "resize3", "resize3_adjoint"]


@lru_cache(maxsize=None)
def lerp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear-interpolation matrix mapping n_in samples to n_out.

    Output sample i reads the source at (i + 0.5) * n_in / n_out - 0.5
    (half-pixel centres), with out-of-range corners clamped to the border.
    Rows are convex weights, so constants are preserved exactly.
    """
    m = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    f = np.floor(pos).astype(int)
    t = pos - f
    lo = np.clip(f, 0, n_in - 1)
    hi = np.clip(f + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - t)
    np.add.at(m, (rows, hi), t)
    m.setflags(write=False)
    return m


def gaussian_kernel(sigma_vox: float, truncate: float = 3.0) -> np.ndarray:
    """Sampled, renormalized Gaussian; sigma 0 gives the identity kernel."""
    if sigma_vox < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma_vox}")
    if sigma_vox == 0.0:
        return np.ones(1)
    radius = int(np.ceil(truncate * sigma_vox))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma_vox) ** 2)
    return k / k.sum()


@lru_cache(maxsize=None)
def _gaussian_matrix_cached(n: int, sigma_vox: float, truncate: float) -> np.ndarray:
    k = gaussian_kernel(sigma_vox, truncate)
    radius = len(k) // 2
    m = np.zeros((n, n))
    idx = np.arange(n)
    for a, w in enumerate(k):
        np.add.at(m, (idx, np.clip(idx + a - radius, 0, n - 1)), w)
    m.setflags(write=False)
    return m


def gaussian_matrix(n: int, sigma_vox: float, truncate: float = 3.0) -> np.ndarray:
    """n x n clamp-to-edge Gaussian smoothing operator along one axis.

    Taps falling outside the grid are folded onto the border samples, the
    matrix form of edge replication.  Rows sum to 1 exactly up to roundoff.
    """
    return _gaussian_matrix_cached(int(n), float(sigma_vox), float(truncate))


def apply_axis(m: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    """Contract matrix m against one axis of arr, keeping axis order."""
    axis = axis % arr.ndim
    out = np.tensordot(m.astype(arr.dtype, copy=False), arr, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def resize3(arr: np.ndarray, out_dims: tuple[int, int, int]) -> np.ndarray:
    """Trilinear resize of the trailing three axes to out_dims."""
    out = arr
    for i in range(3):
        axis = arr.ndim - 3 + i
        n_in = out.shape[axis]
        n_out = out_dims[i]
        if n_in != n_out:
            out = apply_axis(lerp_matrix(n_out, n_in), out, axis)
    if out is arr:
        out = arr.copy()
    return out


def resize3_adjoint(grad: np.ndarray, in_dims: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of :func:`resize3` for a cotangent on the resized output."""
    out = grad
    for i in range(3):
        axis = grad.ndim - 3 + i
        n_out = out.shape[axis]
        n_in = in_dims[i]
        if n_in != n_out:
            out = apply_axis(lerp_matrix(n_out, n_in).T, out, axis)
    if out is grad:
        out = grad.copy()
    return out
