"""Minibatch training: two-stage sampling, Adam, the training loop.

Sampling draws image-pair indices uniformly with replacement, then exactly
one label pair uniformly per drawn entry, so the marginal probability of
slot (n, m) is (1/N)(1/M_n) and the minibatch gradient is an unbiased
estimator of the full weighted objective.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .grids import AffineParams, DisplacementField, GridMeta, LabelMask, Volume
from .losses import (
    MultiscaleConfig,
    DEFAULT_SIGMAS_MM,
    bending_energy,
    l2_gradient_penalty,
    multiscale_cross_entropy_with_grad,
    multiscale_dice_with_grad,
    soft_dice_with_grad,
)
from .losses import _ce_with_grad, filter3
from .network import NetworkConfig, RegistrationNet, load_checkpoint, save_checkpoint
from .spatial import AffineMagnitude, affine_ddf_array, affine_ddf_vjp, random_affine, trilinear_warp, trilinear_warp_vjp
from .volio import read_label, read_volume

logger = logging.getLogger(__name__)

__all__ = [
    "LabelPair",
    "CorpusEntry",
    "TrainingCorpus",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "sample_minibatch",
    "adam_step",
    "train",
    "unbiasedness_check",
    "load_corpus",
    "write_corpus_manifest",
]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last written checkpoint is kept."""


@dataclass(frozen=True)
class LabelPair:
    moving: LabelMask
    fixed: LabelMask
    kind: str = "landmark"


@dataclass(frozen=True)
class CorpusEntry:
    moving: Volume
    fixed: Volume
    label_pairs: tuple[LabelPair, ...]
    ground_truth: DisplacementField | None = None

    def __post_init__(self):
        if len(self.label_pairs) < 1:
            raise ValueError("every corpus entry needs at least one label pair")
        for pair in self.label_pairs:
            if pair.moving.meta != self.moving.meta or pair.fixed.meta != self.fixed.meta:
                raise ValueError("label grids must match their image grids")


@dataclass(frozen=True)
class TrainingCorpus:
    entries: tuple[CorpusEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("corpus is empty")
        meta = self.entries[0].fixed.meta
        for entry in self.entries:
            if entry.fixed.meta != meta or entry.moving.meta != meta:
                raise ValueError("all corpus images must share one grid")

    def __len__(self):
        return len(self.entries)

    @property
    def meta(self) -> GridMeta:
        return self.entries[0].fixed.meta


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters; the defaults are the baseline settings."""

    minibatch: int = 4
    learning_rate: float = 1e-5
    alpha: float = 0.5
    similarity: str = "msdice"  # msdice | msce
    regularizer: str = "bending"  # bending | l2grad
    iterations: int = 2000
    seed: int = 0
    sigmas_mm: tuple[float, ...] = DEFAULT_SIGMAS_MM
    kernel_truncate: float = 3.0
    augment: bool = True
    augment_scale: float = 1.0
    # one affine per image side (moving and fixed drawn independently)
    augment_per_side: bool = True
    prefilter: bool = False
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.minibatch < 1:
            raise ValueError("minibatch size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.similarity not in ("msdice", "msce"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.regularizer not in ("bending", "l2grad"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        object.__setattr__(self, "sigmas_mm", tuple(float(s) for s in self.sigmas_mm))


@dataclass
class TrainResult:
    trace: list[tuple[int, float, float, float]]
    checkpoint: Path | None
    net: RegistrationNet
    adam_t: int


def sample_minibatch(corpus: TrainingCorpus, k: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """K (entry, label) index pairs from the two-stage scheme."""
    entry_idx = rng.integers(0, len(corpus), size=k)
    return [(int(n), int(rng.integers(0, len(corpus.entries[n].label_pairs)))) for n in entry_idx]


def adam_step(store, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int = 1):
    """Bias-corrected Adam update in place; gradients are zeroed after.

    No weight decay is applied.
    """
    if t < 1:
        raise ValueError("step index t must be >= 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name!r} at step {t}")
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
    store.zero_grads()


# -- per-slot loss evaluation ------------------------------------------------


class _SlotLoss:
    """Evaluates one slot's loss and its gradient w.r.t. the slot's field."""

    def __init__(self, cfg: TrainConfig, meta: GridMeta):
        self.cfg = cfg
        self.meta = meta
        self.ms = MultiscaleConfig(cfg.sigmas_mm, meta.spacing, cfg.kernel_truncate)
        self._stack_cache: dict = {}

    def _reg(self, ddf):
        if self.cfg.regularizer == "bending":
            return bending_energy(ddf, self.meta.spacing)
        return l2_gradient_penalty(ddf, self.meta.spacing)

    def _prefiltered(self, key, mov_arr, fix_arr):
        if key not in self._stack_cache:
            sp = self.meta.spacing
            tr = self.cfg.kernel_truncate
            self._stack_cache[key] = (
                [filter3(mov_arr, sp, s, tr) for s in self.cfg.sigmas_mm],
                [filter3(fix_arr, sp, s, tr) for s in self.cfg.sigmas_mm],
            )
        return self._stack_cache[key]

    def _similarity_onthefly(self, ddf, mov_arr, fix_arr):
        sp = self.meta.spacing
        warped, vjp = trilinear_warp_vjp(mov_arr, ddf, sp, sp, need_d_input=False)
        if self.cfg.similarity == "msdice":
            j, _, d_warped, _ = multiscale_dice_with_grad(fix_arr, warped, self.ms, need_d_a=False)
        else:
            j, _, d_warped, _ = multiscale_cross_entropy_with_grad(fix_arr, warped, self.ms, need_d_a=False)
        _, dj_du = vjp(d_warped)
        return j, dj_du

    def _similarity_prefilt(self, ddf, stacks):
        sp = self.meta.spacing
        mov_stack, fix_stack = stacks
        z = len(mov_stack)
        values = []
        dj_du = None
        for mov_f, fix_f in zip(mov_stack, fix_stack):
            warped, vjp = trilinear_warp_vjp(mov_f, ddf, sp, sp, need_d_input=False)
            if self.cfg.similarity == "msdice":
                s, _, d_warped = soft_dice_with_grad(fix_f, warped)
            else:
                s, _, d_warped = _ce_with_grad(fix_f, warped)
            values.append(s)
            _, d = vjp(d_warped)
            dj_du = d if dj_du is None else dj_du + d
        return float(np.mean(values)), dj_du / z

    def __call__(self, ddf, mov_arr, fix_arr, stacks=None):
        """Returns (similarity, regularizer, d_loss/d_ddf)."""
        if stacks is not None:
            j, dj_du = self._similarity_prefilt(ddf, stacks)
        else:
            j, dj_du = self._similarity_onthefly(ddf, mov_arr, fix_arr)
        omega, domega_du = self._reg(ddf)
        d_ddf = -dj_du + self.cfg.alpha * domega_du
        return j, omega, d_ddf


def _augment_side(image_arr, label_arr, stacks, params, meta):
    """Warp one side's image, label (and prefiltered stack) by one affine."""
    aug = affine_ddf_array(params, meta, dtype=image_arr.dtype)
    sp = meta.spacing
    image_out = trilinear_warp(image_arr, aug, sp, sp)
    label_out = trilinear_warp(label_arr, aug, sp, sp)
    stack_out = None
    if stacks is not None:
        stack_out = [trilinear_warp(s, aug, sp, sp) for s in stacks]
    return image_out, label_out, stack_out


def train(corpus: TrainingCorpus, net_cfg: NetworkConfig, cfg: TrainConfig,
          out_dir=None, resume=None, log_every: int = 0) -> TrainResult:
    """Run the optimization loop; deterministic given config and seed.

    Emits one trace row (iteration, similarity, regularizer, total) per
    iteration, and checkpoints every ``checkpoint_interval`` iterations plus
    a final one when ``out_dir`` is given.  ``resume`` continues from a
    checkpoint written by this function, reproducing the uninterrupted
    trajectory.
    """
    meta = corpus.meta
    slot_loss = _SlotLoss(cfg, meta)
    magnitude = AffineMagnitude().scaled(cfg.augment_scale)

    if resume is not None:
        net, manifest = load_checkpoint(resume)
        start_iter = int(manifest["iteration"])
        adam_t = int(manifest["extra"]["adam_t"])
        rng = np.random.default_rng(0)
        rng.bit_generator.state = manifest["extra"]["rng_state"]
        if NetworkConfig(**{**manifest["config"], "summand_levels": tuple(manifest["config"]["summand_levels"])}) != net_cfg:
            raise ValueError("resume checkpoint configuration differs from net_cfg")
    else:
        net = RegistrationNet(net_cfg, seed=cfg.seed)
        start_iter = 0
        adam_t = 0
        rng = np.random.default_rng(cfg.seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    want_affine = net_cfg.head == "affine"
    trace: list[tuple[int, float, float, float]] = []
    last_checkpoint: Path | None = None

    def write_checkpoint(iteration):
        nonlocal last_checkpoint
        if out_dir is None:
            return
        extra = {"adam_t": adam_t, "rng_state": _jsonable_rng_state(rng)}
        last_checkpoint = save_checkpoint(out_dir / f"ckpt_{iteration:06d}", net, iteration, extra)

    for iteration in range(start_iter + 1, cfg.iterations + 1):
        slots = sample_minibatch(corpus, cfg.minibatch, rng)

        moving_batch = []
        fixed_batch = []
        slot_data = []
        for n, m in slots:
            entry = corpus.entries[n]
            pair = entry.label_pairs[m]
            mov_img = entry.moving.data
            fix_img = entry.fixed.data
            mov_lab = pair.moving.data
            fix_lab = pair.fixed.data
            stacks = None
            if cfg.prefilter:
                mov_stack, fix_stack = slot_loss._prefiltered((n, m), mov_lab, fix_lab)
                stacks = (mov_stack, fix_stack)
            if cfg.augment and cfg.augment_scale > 0.0:
                p_mov = random_affine(meta, rng, magnitude)
                p_fix = random_affine(meta, rng, magnitude)
                mov_img, mov_lab, mov_stack_aug = _augment_side(
                    mov_img, mov_lab, stacks[0] if stacks else None, p_mov, meta)
                fix_img, fix_lab, fix_stack_aug = _augment_side(
                    fix_img, fix_lab, stacks[1] if stacks else None, p_fix, meta)
                if stacks:
                    stacks = (mov_stack_aug, fix_stack_aug)
            moving_batch.append(mov_img)
            fixed_batch.append(fix_img)
            slot_data.append((mov_lab, fix_lab, stacks))

        moving_batch = np.stack(moving_batch)
        fixed_batch = np.stack(fixed_batch)

        if want_affine:
            params = net.forward_affine(moving_batch, fixed_batch, training=True)
            ddf_batch = np.stack([
                _affine_field(params[k], meta, moving_batch.dtype) for k in range(len(slots))
            ])
        else:
            _, ddf_batch = net.forward_ddf(moving_batch, fixed_batch, training=True)
        if not np.all(np.isfinite(ddf_batch)):
            logger.error("predicted field diverged at iteration %d", iteration)
            raise TrainingDiverged(
                f"non-finite displacement field at iteration {iteration}"
                + (f"; last checkpoint {last_checkpoint}" if last_checkpoint else "")
            )

        sims, regs = [], []
        d_ddf_batch = np.empty_like(ddf_batch)
        for k, (mov_lab, fix_lab, stacks) in enumerate(slot_data):
            j, omega, d_ddf = slot_loss(ddf_batch[k], mov_lab, fix_lab, stacks)
            sims.append(j)
            regs.append(omega)
            d_ddf_batch[k] = d_ddf / cfg.minibatch

        sim = float(np.mean(sims))
        reg = float(np.mean(regs))
        total = -sim + cfg.alpha * reg
        trace.append((iteration, sim, reg, total))
        if not np.isfinite(total):
            logger.error("loss diverged at iteration %d (total=%r)", iteration, total)
            raise TrainingDiverged(
                f"non-finite loss at iteration {iteration}"
                + (f"; last checkpoint {last_checkpoint}" if last_checkpoint else "")
            )

        net.store.zero_grads()
        if want_affine:
            d_params = np.stack([affine_ddf_vjp(d_ddf_batch[k], meta) for k in range(len(slots))])
            net.backward_affine(d_params.astype(ddf_batch.dtype))
        else:
            net.backward_ddf(d_ddf_batch)

        adam_t += 1
        adam_step(net.store, cfg.learning_rate, t=adam_t)

        if log_every and iteration % log_every == 0:
            logger.info("iter %d: J=%.5f omega=%.5f loss=%.5f", iteration, sim, reg, total)
        if out_dir is not None and (
            iteration % cfg.checkpoint_interval == 0 or iteration == cfg.iterations
        ):
            write_checkpoint(iteration)

    if out_dir is not None:
        _write_trace(out_dir / "loss_trace.csv", trace)
    return TrainResult(trace=trace, checkpoint=last_checkpoint, net=net, adam_t=adam_t)


def _affine_field(flat_params, meta, dtype):
    params = AffineParams.from_flat(np.asarray(flat_params, dtype=np.float64))
    return affine_ddf_array(params, meta, dtype=dtype)


def _jsonable_rng_state(rng) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _write_trace(path: Path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "similarity", "regularizer", "total"])
        writer.writerows(trace)


# -- estimator audit ---------------------------------------------------------


def unbiasedness_check(corpus: TrainingCorpus, net: RegistrationNet,
                       rng: np.random.Generator, n_draws: int = 100_000,
                       minibatch: int = 4, cfg: TrainConfig | None = None) -> dict:
    """Compare sampled minibatch gradients against the exact objective gradient.

    Runs with frozen batch-norm statistics and no augmentation so each
    slot's gradient depends only on the drawn (entry, label) pair; the
    sampled mean is then a reweighting of the per-pair gradients.  Returns a
    report with the enumeration error of the estimator's expectation and
    the fraction of components whose Monte-Carlo mean falls within three
    standard errors of the exact gradient.
    """
    cfg = cfg or TrainConfig(alpha=0.0, augment=False, seed=0)
    meta = corpus.meta
    slot_loss = _SlotLoss(replace(cfg, alpha=0.0), meta)
    names = list(net.store.params)

    def flat_grads():
        return np.concatenate([net.store.params[n].grad.astype(np.float64).ravel() for n in names])

    # gradient of J for every (entry, label) outcome
    outcome_grads = {}
    weights = {}
    for n, entry in enumerate(corpus.entries):
        m_n = len(entry.label_pairs)
        for m, pair in enumerate(entry.label_pairs):
            moving = entry.moving.data.astype(net.store.dtype)[None]
            fixed = entry.fixed.data.astype(net.store.dtype)[None]
            _, ddf = net.forward_ddf(moving, fixed, training=False)
            j, _, d_ddf = slot_loss(ddf[0], pair.moving.data.astype(net.store.dtype),
                                    pair.fixed.data.astype(net.store.dtype))
            net.store.zero_grads()
            # gradient of J itself (not the negated loss)
            net.backward_ddf(-d_ddf[None])
            outcome_grads[(n, m)] = flat_grads()
            weights[(n, m)] = 1.0 / (len(corpus) * m_n)

    keys = sorted(outcome_grads)
    grads = np.stack([outcome_grads[k] for k in keys])
    w = np.array([weights[k] for k in keys])

    # full-batch gradient of the objective: mean over entries of the
    # per-entry label mean
    per_entry = [
        np.mean([outcome_grads[(n, m)] for m in range(len(entry.label_pairs))], axis=0)
        for n, entry in enumerate(corpus.entries)
    ]
    exact = np.mean(per_entry, axis=0)

    # estimator expectation by exact enumeration of one slot draw:
    # sum over the two-stage tree of P(n, m) * g_nm
    enum_mean = w @ grads
    max_weight_error = float(np.max(np.abs(enum_mean - exact)))

    # Monte-Carlo over actual sampler draws; a slot's gradient depends only
    # on its (n, m), so draws reduce to outcome counts
    counts = {k: 0 for k in keys}
    for _ in range(n_draws):
        for nm in sample_minibatch(corpus, minibatch, rng):
            counts[nm] += 1
    total = n_draws * minibatch
    freq = np.array([counts[k] for k in keys], dtype=np.float64) / total
    mc_mean = freq @ grads
    mc_second = freq @ (grads**2)
    variance = np.maximum(mc_second - mc_mean**2, 0.0)
    se = np.sqrt(variance / total)
    diff = np.abs(mc_mean - exact)
    tol = 3.0 * se + 1e-12 * (1.0 + np.abs(exact))
    within = diff <= tol
    return {
        "n_components": int(grads.shape[1]),
        "n_outcomes": len(keys),
        "outcome_weights": {str(k): weights[k] for k in keys},
        "max_weight_error": max_weight_error,
        "fraction_within_3se": float(within.mean()),
        "n_draws": n_draws,
    }


# -- corpus manifest IO ------------------------------------------------------


def write_corpus_manifest(path, cases: list[dict], train_cases: list[int],
                          heldout_cases: list[int], extra: dict | None = None) -> Path:
    """cases[i] holds relative paths: moving_image, fixed_image,
    label_pairs=[{moving, fixed, kind}], optional ground_truth_ddf."""
    manifest = {
        "format": "weakreg-corpus-v1",
        "cases": cases,
        "train_cases": list(train_cases),
        "heldout_cases": list(heldout_cases),
    }
    if extra:
        manifest["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_corpus(manifest_path, indices=None) -> TrainingCorpus:
    """Load (a subset of) the cases listed in a corpus manifest."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "weakreg-corpus-v1":
        raise ValueError(f"unrecognized corpus format {manifest.get('format')!r}")
    root = manifest_path.parent
    cases = manifest["cases"]
    if indices is None:
        indices = range(len(cases))
    entries = []
    for i in indices:
        case = cases[i]
        moving = read_volume(root / case["moving_image"])
        fixed = read_volume(root / case["fixed_image"])
        pairs = tuple(
            LabelPair(
                moving=read_label(root / p["moving"]),
                fixed=read_label(root / p["fixed"]),
                kind=p.get("kind", "landmark"),
            )
            for p in case["label_pairs"]
        )
        gt = None
        if case.get("ground_truth_ddf"):
            gt = read_volume(root / case["ground_truth_ddf"])
        entries.append(CorpusEntry(moving=moving, fixed=fixed, label_pairs=pairs, ground_truth=gt))
    return TrainingCorpus(tuple(entries))


def load_manifest(manifest_path) -> dict:
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("format") != "weakreg-corpus-v1":
        raise ValueError(f"unrecognized corpus format {manifest.get('format')!r}")
    return manifest
