"""Label-similarity measures and deformation regularizers.

Every operation here returns analytic gradients alongside its value; the
test suite holds each one against 64-bit central finite differences.  The
array-level functions are dtype-preserving so tests can run them in float64
while training runs float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .axisops import apply_axis, gaussian_kernel, gaussian_matrix
from .grids import DisplacementField, InvalidGridError, LabelMask

__all__ = [
    "MultiscaleConfig",
    "LossReport",
    "soft_dice",
    "soft_dice_with_grad",
    "gaussian_filter",
    "filter3",
    "filter3_adjoint",
    "multiscale_dice",
    "multiscale_dice_with_grad",
    "multiscale_cross_entropy",
    "multiscale_cross_entropy_with_grad",
    "bending_energy",
    "l2_gradient_penalty",
    "total_loss",
]

DEFAULT_SIGMAS_MM = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0)

# Probability floor inside the cross-entropy logs.
CE_EPS = 1e-6


@dataclass(frozen=True)
class MultiscaleConfig:
    """Gaussian scales (mm) of the multiscale similarity, bound to a grid.

    ``kernels[z][axis]`` holds the sampled 1D kernel of scale z along each
    axis, in voxel units sigma_mm / spacing.
    """

    sigmas_mm: tuple[float, ...]
    spacing: tuple[float, float, float]
    truncate: float = 3.0

    def __post_init__(self):
        if len(self.sigmas_mm) < 1:
            raise InvalidGridError("at least one scale is required")
        if any(s < 0 for s in self.sigmas_mm):
            raise InvalidGridError(f"scales must be >= 0, got {self.sigmas_mm}")
        object.__setattr__(self, "sigmas_mm", tuple(float(s) for s in self.sigmas_mm))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @classmethod
    def default(cls, spacing=(0.8, 0.8, 0.8)) -> "MultiscaleConfig":
        return cls(DEFAULT_SIGMAS_MM, tuple(spacing))

    @property
    def n_scales(self) -> int:
        return len(self.sigmas_mm)

    @property
    def kernels(self) -> tuple[tuple[np.ndarray, ...], ...]:
        return tuple(
            tuple(gaussian_kernel(s / sp, self.truncate) for sp in self.spacing)
            for s in self.sigmas_mm
        )


def _data(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x
    return np.asarray(x.data if hasattr(x, "data") else x)


def soft_dice_with_grad(a, b):
    """Soft probabilistic Dice 2*sum(ab) / (sum(a) + sum(b)) with gradients.

    A pair that is empty on both sides carries no alignment information and
    scores 1.0 with zero gradient.
    """
    a = _data(a)
    b = _data(b)
    if a.shape != b.shape:
        raise InvalidGridError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom <= 0.0:
        return 1.0, np.zeros_like(a), np.zeros_like(b)
    value = 2.0 * (a * b).sum() / denom
    d_a = (2.0 * b - value) / denom
    d_b = (2.0 * a - value) / denom
    return float(value), d_a, d_b


def soft_dice(a, b) -> float:
    value, _, _ = soft_dice_with_grad(a, b)
    return value


def filter3(arr: np.ndarray, spacing, sigma_mm: float, truncate: float = 3.0) -> np.ndarray:
    """Separable clamp-to-edge Gaussian over the trailing three axes."""
    if sigma_mm == 0.0:
        return arr
    out = arr
    for i in range(3):
        axis = arr.ndim - 3 + i
        m = gaussian_matrix(arr.shape[axis], sigma_mm / spacing[i], truncate)
        out = apply_axis(m, out, axis)
    return out


def filter3_adjoint(grad: np.ndarray, spacing, sigma_mm: float, truncate: float = 3.0) -> np.ndarray:
    """Adjoint of :func:`filter3` (transposed per-axis operators)."""
    if sigma_mm == 0.0:
        return grad
    out = grad
    for i in reversed(range(3)):
        axis = grad.ndim - 3 + i
        m = gaussian_matrix(grad.shape[axis], sigma_mm / spacing[i], truncate)
        out = apply_axis(m.T, out, axis)
    return out


def gaussian_filter(l: LabelMask, sigma_mm: float, truncate: float = 3.0) -> LabelMask:
    """Smooth a label; sigma 0 is the exact identity, output stays in [0, 1]."""
    if sigma_mm == 0.0:
        return l
    out = filter3(l.data, l.meta.spacing, sigma_mm, truncate)
    return LabelMask(l.meta, np.clip(out, 0.0, 1.0))


def multiscale_dice_with_grad(a, b, cfg: MultiscaleConfig, need_d_a: bool = True):
    """Mean soft Dice over Gaussian-filtered copies of both masks.

    Returns (value, d_a, d_b, per_scale); gradients pass through the filter
    adjoints.  need_d_a=False skips the first argument's adjoint chain
    (d_a comes back None).
    """
    a = _data(a)
    b = _data(b)
    d_a = np.zeros_like(a) if need_d_a else None
    d_b = np.zeros_like(b)
    per_scale = []
    z = cfg.n_scales
    for sigma in cfg.sigmas_mm:
        fa = filter3(a, cfg.spacing, sigma, cfg.truncate)
        fb = filter3(b, cfg.spacing, sigma, cfg.truncate)
        s, dfa, dfb = soft_dice_with_grad(fa, fb)
        per_scale.append(s)
        if need_d_a:
            d_a += filter3_adjoint(dfa, cfg.spacing, sigma, cfg.truncate)
        d_b += filter3_adjoint(dfb, cfg.spacing, sigma, cfg.truncate)
    if need_d_a:
        d_a /= z
    d_b /= z
    return float(np.mean(per_scale)), d_a, d_b, per_scale


def multiscale_dice(a, b, cfg: MultiscaleConfig) -> float:
    a = _data(a)
    b = _data(b)
    vals = [
        soft_dice(
            filter3(a, cfg.spacing, s, cfg.truncate),
            filter3(b, cfg.spacing, s, cfg.truncate),
        )
        for s in cfg.sigmas_mm
    ]
    return float(np.mean(vals))


def _ce_with_grad(a, b):
    """sum_i sum_c p_c(a) log p_c(b) with p1 = value, p2 = 1 - value.

    Probabilities are floored at CE_EPS inside each log, so an exact binary
    match scores exactly 0 and the gradient vanishes where the floor is
    active.
    """
    fg = np.maximum(b, CE_EPS)
    bg = np.maximum(1.0 - b, CE_EPS)
    value = (a * np.log(fg) + (1.0 - a) * np.log(bg)).sum()
    d_a = np.log(fg) - np.log(bg)
    d_b = np.where(b > CE_EPS, a / fg, 0.0) - np.where(1.0 - b > CE_EPS, (1.0 - a) / bg, 0.0)
    return float(value), d_a, d_b


def multiscale_cross_entropy_with_grad(a, b, cfg: MultiscaleConfig, need_d_a: bool = True):
    """Mean negative cross-entropy over scales; 0 at an exact binary match."""
    a = _data(a)
    b = _data(b)
    d_a = np.zeros_like(a) if need_d_a else None
    d_b = np.zeros_like(b)
    per_scale = []
    z = cfg.n_scales
    for sigma in cfg.sigmas_mm:
        fa = filter3(a, cfg.spacing, sigma, cfg.truncate)
        fb = filter3(b, cfg.spacing, sigma, cfg.truncate)
        s, dfa, dfb = _ce_with_grad(fa, fb)
        per_scale.append(s)
        if need_d_a:
            d_a += filter3_adjoint(dfa, cfg.spacing, sigma, cfg.truncate)
        d_b += filter3_adjoint(dfb, cfg.spacing, sigma, cfg.truncate)
    if need_d_a:
        d_a /= z
    d_b /= z
    return float(np.mean(per_scale)), d_a, d_b, per_scale


def multiscale_cross_entropy(a, b, cfg: MultiscaleConfig) -> float:
    value, _, _, _ = multiscale_cross_entropy_with_grad(a, b, cfg)
    return value


def _interior_count(dims) -> int:
    n = 1
    for d in dims:
        if d < 3:
            raise InvalidGridError("regularizers need dims >= 3 per axis")
        n *= d - 2
    return n


def bending_energy(u, spacing=None):
    """Mean squared second derivatives of the displacement field.

    u_xx^2 + u_yy^2 + u_zz^2 + 2 u_xy^2 + 2 u_xz^2 + 2 u_yz^2, central
    stencils in physical units, averaged over interior voxels and the three
    components.  Returns (value, d_u).
    """
    if isinstance(u, DisplacementField):
        spacing = u.meta.spacing
        u = u.data
    u = np.asarray(u)
    s = [float(x) for x in spacing]
    n_int = _interior_count(u.shape[1:])
    norm = 1.0 / (3.0 * n_int)
    inner = (slice(1, -1),) * 3
    value = 0.0
    grad = np.zeros_like(u)

    def axis_slices(ax, kind):
        # slices for u[.. shifted along ax ..] restricted to the interior
        sl = [slice(1, -1)] * 3
        sl[ax] = {"+": slice(2, None), "0": slice(1, -1), "-": slice(None, -2)}[kind]
        return tuple(sl)

    for c in range(3):
        uc = u[c]
        gc = grad[c]
        # unmixed terms
        for ax in range(3):
            h2 = s[ax] * s[ax]
            d2 = (uc[axis_slices(ax, "+")] - 2.0 * uc[inner] + uc[axis_slices(ax, "-")]) / h2
            value += norm * (d2 * d2).sum()
            gd = (2.0 * norm / h2) * d2
            gc[axis_slices(ax, "+")] += gd
            gc[inner] -= 2.0 * gd
            gc[axis_slices(ax, "-")] += gd
        # mixed terms, weight 2
        for ax1, ax2 in ((0, 1), (0, 2), (1, 2)):
            h = 4.0 * s[ax1] * s[ax2]

            def corner(k1, k2):
                sl = [slice(1, -1)] * 3
                sl[ax1] = slice(2, None) if k1 > 0 else slice(None, -2)
                sl[ax2] = slice(2, None) if k2 > 0 else slice(None, -2)
                return tuple(sl)

            d2 = (uc[corner(1, 1)] - uc[corner(1, -1)] - uc[corner(-1, 1)] + uc[corner(-1, -1)]) / h
            value += 2.0 * norm * (d2 * d2).sum()
            gd = (4.0 * norm / h) * d2
            gc[corner(1, 1)] += gd
            gc[corner(1, -1)] -= gd
            gc[corner(-1, 1)] -= gd
            gc[corner(-1, -1)] += gd
    return float(value), grad


def l2_gradient_penalty(u, spacing=None):
    """Mean squared Frobenius norm of du/dx over interior voxels.

    Central first differences in physical units.  Returns (value, d_u).
    """
    if isinstance(u, DisplacementField):
        spacing = u.meta.spacing
        u = u.data
    u = np.asarray(u)
    s = [float(x) for x in spacing]
    n_int = _interior_count(u.shape[1:])
    norm = 1.0 / n_int
    value = 0.0
    grad = np.zeros_like(u)

    def shifted(ax, kind):
        sl = [slice(1, -1)] * 3
        sl[ax] = slice(2, None) if kind > 0 else slice(None, -2)
        return tuple(sl)

    for c in range(3):
        uc = u[c]
        gc = grad[c]
        for ax in range(3):
            h = 2.0 * s[ax]
            d1 = (uc[shifted(ax, 1)] - uc[shifted(ax, -1)]) / h
            value += norm * (d1 * d1).sum()
            gd = (2.0 * norm / h) * d1
            gc[shifted(ax, 1)] += gd
            gc[shifted(ax, -1)] -= gd
    return float(value), grad


def total_loss(similarity: float, regularizer: float, alpha: float = 0.5) -> float:
    """Training objective -J + alpha * Omega."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return -similarity + alpha * regularizer


@dataclass(frozen=True)
class LossReport:
    """One evaluation of the training objective."""

    similarity: float
    regularizer: float
    alpha: float
    per_scale: tuple[float, ...]

    @property
    def total(self) -> float:
        return total_loss(self.similarity, self.regularizer, self.alpha)
