"""Synthetic phantom corpus with known ground-truth deformations.

Each case carries one gland-like ellipsoid and a handful of small landmark
blobs, all defined analytically in the moving frame.  The fixed side is the
analytic pull-back of the same geometry through a known smooth transform
(mild affine plus a low-frequency sinusoid), so the ground-truth field is
available voxel-exactly.  The two sides are rendered as distinct
pseudo-modalities: a monotone intensity remap with multiplicative speckle
on the moving side, an inverted-contrast remap with additive noise on the
fixed side.  Raw intensity matching is therefore uninformative and
alignment must come from the labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .grids import DisplacementField, GridMeta, LabelMask, Volume, normalize_intensity
from .losses import bending_energy
from .spatial import jacobian_determinant_map
from .training import CorpusEntry, LabelPair, TrainingCorpus, write_corpus_manifest
from .volio import write_volume

logger = logging.getLogger(__name__)

__all__ = ["PhantomSpec", "PhantomError", "synth_corpus", "write_corpus"]


class PhantomError(RuntimeError):
    """Generation could not satisfy the field invariants."""


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom geometry, ground-truth deformation and rendering parameters."""

    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (0.8, 0.8, 0.8)
    # gland ellipsoid
    gland_radius_mm: tuple[float, float] = (5.5, 7.5)
    gland_center_jitter_mm: float = 1.0
    # landmark blobs (always inside the gland)
    blob_count: tuple[int, int] = (2, 6)
    blob_radius_mm: tuple[float, float] = (1.2, 2.2)
    blob_margin_mm: float = 1.0
    # ground-truth deformation
    deform_magnitude: float = 1.0
    rotation_deg: float = 5.0
    log_scale: float = 0.06
    translation_mm: float = 3.0
    sine_amplitude_mm: float = 1.3
    sine_cycles: int = 1
    max_attempts: int = 10
    gt_bending_bound: float = 0.05
    # rendering
    edge_width_mm: float = 1.0
    texture_amplitude: float = 0.05
    speckle_moving: float = 0.08
    noise_fixed: float = 0.05
    seed: int = 0

    @property
    def meta(self) -> GridMeta:
        return GridMeta(self.dims, self.spacing)


class _SoftGeometry:
    """Analytic soft indicators of the case geometry in the moving frame."""

    def __init__(self, spec: PhantomSpec, rng: np.random.Generator):
        self.spec = spec
        extent = np.asarray(spec.meta.extent_mm)
        center = (np.asarray(spec.dims) - 1.0) * np.asarray(spec.spacing) / 2.0
        jitter = rng.uniform(-1.0, 1.0, 3) * spec.gland_center_jitter_mm
        self.gland_center = center + jitter
        self.gland_radii = rng.uniform(*spec.gland_radius_mm, size=3)
        axis = rng.standard_normal(3)
        angle = rng.uniform(0.0, np.pi)
        from .spatial import _rotation_matrix

        self.gland_rot = _rotation_matrix(axis, angle)
        n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
        self.blobs = []
        min_r = float(self.gland_radii.min())
        for _ in range(n_blobs):
            radius = rng.uniform(*spec.blob_radius_mm)
            limit = max(0.05, 1.0 - (radius + spec.blob_margin_mm) / min_r)
            while True:
                u = rng.uniform(-1.0, 1.0, 3)
                if np.linalg.norm(u) <= limit:
                    break
            center_mm = self.gland_center + self.gland_rot @ (u * self.gland_radii)
            self.blobs.append((center_mm, radius))
        self.extent = extent

    def _soft_ball(self, points, center, radius):
        d = np.sqrt(((points - center.reshape(3, 1)) ** 2).sum(axis=0))
        w = self.spec.edge_width_mm
        return np.clip((radius - d) / w + 0.5, 0.0, 1.0)

    def gland(self, points):
        """points: (3, n) mm. Soft ellipsoid indicator."""
        rel = self.gland_rot.T @ (points - self.gland_center.reshape(3, 1))
        # approximate signed distance: normalized radius scaled by the
        # smallest semi-axis
        r = np.sqrt(((rel / self.gland_radii.reshape(3, 1)) ** 2).sum(axis=0))
        w = self.spec.edge_width_mm
        return np.clip((1.0 - r) * self.gland_radii.min() / w + 0.5, 0.0, 1.0)

    def blob(self, points, index):
        center, radius = self.blobs[index]
        return self._soft_ball(points, center, radius)

    def tissue(self, points):
        g = self.gland(points)
        b = np.zeros_like(g)
        for i in range(len(self.blobs)):
            np.maximum(b, self.blob(points, i), out=b)
        return 0.1 + 0.4 * g + 0.4 * b


class _SmoothTransform:
    """x -> x + u(x): affine about the grid centre plus a low-frequency sine."""

    def __init__(self, spec: PhantomSpec, rng: np.random.Generator, magnitude: float):
        from .spatial import _rotation_matrix

        extent = np.asarray(spec.meta.extent_mm)
        center = (np.asarray(spec.dims) - 1.0) * np.asarray(spec.spacing) / 2.0
        axis = rng.standard_normal(3)
        angle = np.deg2rad(rng.uniform(-spec.rotation_deg, spec.rotation_deg)) * magnitude
        scales = np.exp(rng.uniform(-spec.log_scale, spec.log_scale, 3) * magnitude)
        self.matrix = _rotation_matrix(axis, angle) @ np.diag(scales)
        t_draw = rng.uniform(-spec.translation_mm, spec.translation_mm, 3) * magnitude
        self.offset = center - self.matrix @ center + t_draw
        self.amp = rng.uniform(0.5, 1.0, 3) * spec.sine_amplitude_mm * magnitude
        self.freq = 2.0 * np.pi * spec.sine_cycles / extent
        self.phase = rng.uniform(0.0, 2.0 * np.pi, 3)
        self.wave_axis = rng.integers(0, 3, size=3)  # which coordinate drives each component

    def displacement(self, points):
        """points: (3, n) mm -> (3, n) mm."""
        lin = self.matrix @ points + self.offset.reshape(3, 1) - points
        for c in range(3):
            ax = int(self.wave_axis[c])
            lin[c] += self.amp[c] * np.sin(self.freq[ax] * points[ax] + self.phase[c])
        return lin

    def __call__(self, points):
        return points + self.displacement(points)


def _grid_points(meta: GridMeta) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) * s for n, s in zip(meta.dims, meta.spacing)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()])


def _texture(points, rng, extent, amplitude):
    out = np.zeros(points.shape[1])
    for _ in range(3):
        k = rng.integers(1, 3, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        weight = rng.uniform(0.5, 1.0)
        arg = sum(2.0 * np.pi * k[d] * points[d] / extent[d] for d in range(3)) + phase
        out += weight * np.sin(arg)
    return amplitude * out


def _render_case(spec: PhantomSpec, geometry: _SoftGeometry, transform: _SmoothTransform,
                 rng: np.random.Generator):
    meta = spec.meta
    pts = _grid_points(meta)
    pts_warped = transform(pts)  # fixed voxel x sees moving-frame point T(x)
    extent = np.asarray(meta.extent_mm)

    def vol(values):
        return values.reshape(meta.dims).astype(np.float32)

    texture_seedling = rng.integers(0, 2**32)
    tex_rng = np.random.default_rng(texture_seedling)
    tex_mov = _texture(pts, tex_rng, extent, spec.texture_amplitude)
    tex_rng = np.random.default_rng(texture_seedling)
    tex_fix = _texture(pts_warped, tex_rng, extent, spec.texture_amplitude)

    tissue_mov = geometry.tissue(pts) + tex_mov
    tissue_fix = geometry.tissue(pts_warped) + tex_fix

    # distinct pseudo-modalities
    base_mov = np.power(np.clip(tissue_mov, 0.0, 1.2), 0.8)
    speckle = 1.0 + spec.speckle_moving * rng.standard_normal(pts.shape[1])
    moving_img = normalize_intensity(Volume(meta, vol(base_mov * speckle)))

    base_fix = np.power(np.clip(1.1 - tissue_fix, 0.0, 1.2), 1.4)
    noise = spec.noise_fixed * rng.standard_normal(pts.shape[1])
    fixed_img = normalize_intensity(Volume(meta, vol(base_fix + noise)))

    pairs = [
        LabelPair(
            moving=LabelMask(meta, vol(geometry.gland(pts))),
            fixed=LabelMask(meta, vol(geometry.gland(pts_warped))),
            kind="gland",
        )
    ]
    for i in range(len(geometry.blobs)):
        pairs.append(
            LabelPair(
                moving=LabelMask(meta, vol(geometry.blob(pts, i))),
                fixed=LabelMask(meta, vol(geometry.blob(pts_warped, i))),
                kind="landmark",
            )
        )

    gt = DisplacementField(meta, transform.displacement(pts).reshape((3,) + meta.dims).astype(np.float32))
    return CorpusEntry(moving=moving_img, fixed=fixed_img, label_pairs=tuple(pairs), ground_truth=gt)


def _admissible(spec: PhantomSpec, gt: DisplacementField) -> bool:
    if float(jacobian_determinant_map(gt).data.min()) <= 0.0:
        return False
    value, _ = bending_energy(gt)
    return value <= spec.gt_bending_bound


def synth_corpus(spec: PhantomSpec, n_cases: int) -> TrainingCorpus:
    """Generate n_cases phantom cases; ground truth rides on each entry.

    A draw whose ground-truth field folds (or exceeds the smoothness bound)
    is regenerated at reduced magnitude, failing after max_attempts.
    """
    rng = np.random.default_rng(spec.seed)
    entries = []
    for index in range(n_cases):
        geometry = _SoftGeometry(spec, rng)
        magnitude = spec.deform_magnitude
        for attempt in range(spec.max_attempts):
            transform = _SmoothTransform(spec, rng, magnitude)
            entry = _render_case(spec, geometry, transform, rng)
            if _admissible(spec, entry.ground_truth):
                entries.append(entry)
                break
            magnitude *= 0.7
            logger.warning("case %d: retrying at magnitude %.3f", index, magnitude)
        else:
            raise PhantomError(
                f"case {index}: no admissible deformation after {spec.max_attempts} attempts"
            )
    return TrainingCorpus(tuple(entries))


def write_corpus(corpus: TrainingCorpus, out_dir, n_train: int, extra: dict | None = None):
    """Write all cases plus a manifest with the train/held-out split."""
    from pathlib import Path

    out_dir = Path(out_dir)
    cases = []
    for i, entry in enumerate(corpus.entries):
        case = f"case{i:03d}"
        write_volume(entry.moving, out_dir / case / "moving")
        write_volume(entry.fixed, out_dir / case / "fixed")
        pair_specs = []
        for j, pair in enumerate(entry.label_pairs):
            write_volume(pair.moving, out_dir / case / f"label{j:02d}_moving")
            write_volume(pair.fixed, out_dir / case / f"label{j:02d}_fixed")
            pair_specs.append(
                {
                    "moving": f"{case}/label{j:02d}_moving",
                    "fixed": f"{case}/label{j:02d}_fixed",
                    "kind": pair.kind,
                }
            )
        record = {
            "moving_image": f"{case}/moving",
            "fixed_image": f"{case}/fixed",
            "label_pairs": pair_specs,
        }
        if entry.ground_truth is not None:
            write_volume(entry.ground_truth, out_dir / case / "gt_ddf")
            record["ground_truth_ddf"] = f"{case}/gt_ddf"
        cases.append(record)
    n = len(corpus.entries)
    return write_corpus_manifest(
        out_dir / "corpus.json",
        cases,
        train_cases=list(range(min(n_train, n))),
        heldout_cases=list(range(min(n_train, n), n)),
        extra=extra,
    )
