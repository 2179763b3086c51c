"""Registration quality metrics and the evaluation harness.

TRE is the per-case root-mean-square of centroid distances between warped
moving landmarks and their fixed counterparts; gland pairs feed the binary
DSC only (threshold 0.5 after trilinear warping) and are excluded from TRE.
Corpus summaries report the median and the [10th, 25th, 75th, 90th]
percentiles.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grids import AffineParams, DisplacementField, GridMeta, LabelMask, Volume, centroid
from .network import RegistrationNet, load_checkpoint
from .spatial import (
    affine_to_ddf,
    displacement_magnitude_map,
    gradient_l2norm_map,
    jacobian_determinant_map,
    warp,
)
from .training import TrainingCorpus
from .volio import write_volume

logger = logging.getLogger(__name__)

__all__ = [
    "EvalReport",
    "centroid_distance",
    "tre",
    "dsc",
    "percentile_summary",
    "predict_ddf",
    "register_pair",
    "evaluate",
    "evaluate_fields",
    "write_report",
    "audit_split",
]

DSC_THRESHOLD = 0.5
PERCENTILES = (10, 25, 75, 90)


def centroid_distance(warped: LabelMask, fixed: LabelMask) -> float:
    """Euclidean distance between centres of mass, in mm."""
    return float(np.linalg.norm(centroid(warped) - centroid(fixed)))


def tre(pairs) -> float | None:
    """RMS centroid distance over one case's (warped, fixed) landmark pairs.

    Pairs with an empty side cannot be evaluated and are excluded with a
    warning; returns None if nothing remains.
    """
    distances = []
    for warped, fixed in pairs:
        if float(np.asarray(warped.data).sum()) <= 0.0 or float(np.asarray(fixed.data).sum()) <= 0.0:
            logger.warning("skipping empty landmark pair in TRE")
            continue
        distances.append(centroid_distance(warped, fixed))
    if not distances:
        return None
    return float(np.sqrt(np.mean(np.square(distances))))


def dsc(warped_gland: LabelMask, fixed_gland: LabelMask, threshold: float = DSC_THRESHOLD) -> float | None:
    """Binary Dice between thresholded gland masks; None if both are empty."""
    a = np.asarray(warped_gland.data) >= threshold
    b = np.asarray(fixed_gland.data) >= threshold
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        logger.warning("both gland masks empty after thresholding")
        return None
    return 2.0 * float(np.logical_and(a, b).sum()) / denom


def percentile_summary(values) -> dict:
    values = np.asarray(values, dtype=np.float64)
    out = {"median": float(np.median(values))}
    for p in PERCENTILES:
        out[f"p{p}"] = float(np.percentile(values, p))
    return out


@dataclass
class EvalReport:
    n_cases: int
    per_case_tre_mm: list
    per_case_dsc: list
    tre_mm: dict
    dsc: dict
    negative_jacobian_voxels: int
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def predict_ddf(net: RegistrationNet, moving: Volume, fixed: Volume) -> DisplacementField:
    """Run inference (frozen statistics) for one image pair."""
    meta = fixed.meta
    m = moving.data[None].astype(net.store.dtype)
    f = fixed.data[None].astype(net.store.dtype)
    if net.cfg.head == "affine":
        params = net.forward_affine(m, f, training=False)[0]
        return affine_to_ddf(AffineParams.from_flat(np.asarray(params, dtype=np.float64)), meta)
    _, ddf = net.forward_ddf(m, f, training=False)
    return DisplacementField(meta, np.asarray(ddf[0], dtype=np.float32))


def register_pair(checkpoint, moving: Volume, fixed: Volume) -> DisplacementField:
    """Load a checkpoint and predict the field aligning moving to fixed."""
    net, _ = load_checkpoint(checkpoint)
    return predict_ddf(net, moving, fixed)


def _case_metrics(entry, ddf: DisplacementField):
    landmark_pairs = []
    gland_scores = []
    for pair in entry.label_pairs:
        warped = warp(pair.moving, ddf)
        if pair.kind == "gland":
            score = dsc(warped, pair.fixed)
            if score is not None:
                gland_scores.append(score)
        else:
            landmark_pairs.append((warped, pair.fixed))
    case_tre = tre(landmark_pairs)
    case_dsc = float(np.mean(gland_scores)) if gland_scores else None
    return case_tre, case_dsc


def _write_case_maps(maps_dir: Path, index: int, entry, ddf: DisplacementField):
    case_dir = maps_dir / f"case{index:03d}"
    write_volume(jacobian_determinant_map(ddf), case_dir / "jacobian_det")
    write_volume(displacement_magnitude_map(ddf), case_dir / "displacement_magnitude")
    write_volume(gradient_l2norm_map(ddf), case_dir / "gradient_l2norm")
    write_volume(warp(entry.moving, ddf), case_dir / "warped_moving")


def evaluate_fields(corpus: TrainingCorpus, fields, maps_dir=None, metadata=None) -> EvalReport:
    """Score a displacement field per case (fields[i] belongs to entry i)."""
    if len(fields) != len(corpus.entries):
        raise ValueError("one displacement field per case is required")
    maps_dir = Path(maps_dir) if maps_dir is not None else None
    tres, dscs = [], []
    negative_voxels = 0
    for i, (entry, ddf) in enumerate(zip(corpus.entries, fields)):
        if ddf.meta != entry.fixed.meta:
            raise ValueError(f"case {i}: field grid does not match the case grid")
        case_tre, case_dsc = _case_metrics(entry, ddf)
        if case_tre is not None:
            tres.append(case_tre)
        if case_dsc is not None:
            dscs.append(case_dsc)
        negative_voxels += int((jacobian_determinant_map(ddf).data < 0.0).sum())
        if maps_dir is not None:
            _write_case_maps(maps_dir, i, entry, ddf)
    meta = {
        "tre_excludes_gland": True,
        "dsc_threshold": DSC_THRESHOLD,
        "percentiles": list(PERCENTILES),
    }
    meta.update(metadata or {})
    return EvalReport(
        n_cases=len(corpus.entries),
        per_case_tre_mm=tres,
        per_case_dsc=dscs,
        tre_mm=percentile_summary(tres) if tres else {},
        dsc=percentile_summary(dscs) if dscs else {},
        negative_jacobian_voxels=negative_voxels,
        metadata=meta,
    )


def evaluate(net: RegistrationNet, corpus: TrainingCorpus, maps_dir=None, metadata=None) -> EvalReport:
    """Run inference on every case and score it."""
    fields = [predict_ddf(net, entry.moving, entry.fixed) for entry in corpus.entries]
    return evaluate_fields(corpus, fields, maps_dir=maps_dir, metadata=metadata)


def write_report(report: EvalReport, path) -> Path:
    """Write the JSON report plus a CSV percentile table alongside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
    csv_path = path.with_suffix(".csv")
    rows = ["metric,median," + ",".join(f"p{p}" for p in PERCENTILES)]
    for name, summary in (("tre_mm", report.tre_mm), ("dsc", report.dsc)):
        if summary:
            rows.append(
                f"{name},{summary['median']:.6g},"
                + ",".join(f"{summary[f'p{p}']:.6g}" for p in PERCENTILES)
            )
    csv_path.write_text("\n".join(rows) + "\n")
    return path


def audit_split(manifest: dict):
    """Fail loudly if the train and held-out case sets overlap."""
    train = set(manifest["train_cases"])
    heldout = set(manifest["heldout_cases"])
    overlap = train & heldout
    if overlap:
        raise ValueError(f"train/held-out case sets overlap: {sorted(overlap)}")
    return train, heldout
