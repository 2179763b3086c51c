"""Shared test utilities: independent oracles and finite-difference checks.

Everything here is deliberately written against the mathematical definition
(dense gathers, explicit loops) rather than reusing the package's fast
paths, so tests compare two independent routes.
"""

from __future__ import annotations

import numpy as np

from weakreg.axisops import gaussian_kernel


def dense_gaussian_3d(arr: np.ndarray, spacing, sigma_mm: float, truncate: float = 3.0) -> np.ndarray:
    """Dense 3D Gaussian: materialized full kernel over an edge-padded array."""
    kernels = [gaussian_kernel(sigma_mm / spacing[ax], truncate) for ax in range(3)]
    k3 = kernels[0][:, None, None] * kernels[1][None, :, None] * kernels[2][None, None, :]
    radii = [len(k) // 2 for k in kernels]
    padded = np.pad(
        np.asarray(arr, dtype=np.float64),
        [(r, r) for r in radii],
        mode="edge",
    )
    windows = np.lib.stride_tricks.sliding_window_view(padded, k3.shape)
    return np.einsum("xyzabc,abc->xyz", windows, k3)


def trilinear_upsample_oracle(arr: np.ndarray, out_dims) -> np.ndarray:
    """Direct (non-separable) trilinear resize with half-pixel centres."""
    in_dims = arr.shape
    out = np.zeros(tuple(out_dims), dtype=np.float64)
    coords = []
    for ax in range(3):
        pos = (np.arange(out_dims[ax]) + 0.5) * (in_dims[ax] / out_dims[ax]) - 0.5
        f = np.floor(pos).astype(int)
        t = pos - f
        coords.append((np.clip(f, 0, in_dims[ax] - 1), np.clip(f + 1, 0, in_dims[ax] - 1), t))
    for i in range(out_dims[0]):
        x0, x1, tx = coords[0][0][i], coords[0][1][i], coords[0][2][i]
        for j in range(out_dims[1]):
            y0, y1, ty = coords[1][0][j], coords[1][1][j], coords[1][2][j]
            for k in range(out_dims[2]):
                z0, z1, tz = coords[2][0][k], coords[2][1][k], coords[2][2][k]
                acc = 0.0
                for (xi, wx) in ((x0, 1 - tx), (x1, tx)):
                    for (yi, wy) in ((y0, 1 - ty), (y1, ty)):
                        for (zi, wz) in ((z0, 1 - tz), (z1, tz)):
                            acc += wx * wy * wz * arr[xi, yi, zi]
                out[i, j, k] = acc
    return out


def sphere_label(dims, spacing, center_mm, radius_mm, width_mm=0.8):
    """Soft sphere indicator with a linear one-voxel-ish edge ramp."""
    axes = [np.arange(n) * s for n, s in zip(dims, spacing)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    dist = np.sqrt(
        (gx - center_mm[0]) ** 2 + (gy - center_mm[1]) ** 2 + (gz - center_mm[2]) ** 2
    )
    return np.clip((radius_mm - dist) / width_mm + 0.5, 0.0, 1.0).astype(np.float32)


def translated_sphere_entry(dims=(32, 32, 32), spacing=(0.8, 0.8, 0.8), shift_mm=(3.2, 0.0, 0.0),
                            radius_mm=6.0, seed=99):
    """A single training case: one sphere, rigidly shifted between sides."""
    from weakreg import GridMeta, LabelMask, Volume, normalize_intensity
    from weakreg.training import CorpusEntry, LabelPair

    rng_local = np.random.default_rng(seed)
    meta = GridMeta(dims, spacing)
    center = (np.array(dims) - 1) * np.array(spacing) / 2.0
    fix_lab = sphere_label(dims, spacing, center, radius_mm)
    mov_lab = sphere_label(dims, spacing, center + np.array(shift_mm), radius_mm)
    mov_img = normalize_intensity(
        Volume(meta, (2.0 * mov_lab + 0.05 * rng_local.normal(size=dims)).astype(np.float32))
    )
    fix_img = normalize_intensity(
        Volume(meta, (-1.5 * fix_lab + 0.05 * rng_local.normal(size=dims)).astype(np.float32))
    )
    return CorpusEntry(
        moving=mov_img,
        fixed=fix_img,
        label_pairs=(LabelPair(LabelMask(meta, mov_lab), LabelMask(meta, fix_lab)),),
    )


def finite_diff(f, x: np.ndarray, indices, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at the given flat indices."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(len(indices))
    flat = x.reshape(-1)
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * eps)
    return out


def assert_grad_matches(f, x: np.ndarray, analytic: np.ndarray, rng: np.random.Generator,
                        n_probe: int = 24, eps: float = 1e-5, rtol: float = 1e-4,
                        atol: float = 1e-8):
    """Probe random components of the analytic gradient against central FD."""
    x = np.asarray(x, dtype=np.float64)
    size = x.size
    n_probe = min(n_probe, size)
    indices = rng.choice(size, size=n_probe, replace=False)
    fd = finite_diff(f, x, indices, eps)
    an = np.asarray(analytic, dtype=np.float64).reshape(-1)[indices]
    err = np.abs(fd - an)
    tol = rtol * np.maximum(np.abs(fd), np.abs(an)) + atol
    assert np.all(err <= tol), (
        f"gradient mismatch: max err {err.max():.3e} vs tol {tol[err.argmax()]:.3e} "
        f"(fd={fd[err.argmax()]:.6e}, analytic={an[err.argmax()]:.6e})"
    )
