"""Command-line interface.

Subcommands: synth (phantom corpus), train, register, warp, evaluate,
inspect.  All volumes use the json+raw pair format; reports are JSON with a
CSV percentile table alongside.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .grids import LabelMask
from .metrics import audit_split, evaluate, register_pair, write_report
from .network import NetworkConfig, load_checkpoint
from .phantom import PhantomSpec, synth_corpus, write_corpus
from .spatial import displacement_magnitude_map, gradient_l2norm_map, jacobian_determinant_map, warp
from .training import TrainConfig, load_corpus, load_manifest, train
from .volio import read_label, read_volume, write_volume

logger = logging.getLogger(__name__)

AFFINE_DEFAULT_LR = 1e-6


def _dataclass_from_dict(cls, values: dict, what: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise SystemExit(f"unknown {what} option(s): {sorted(unknown)}")
    coerced = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in values.items()
    }
    return cls(**coerced)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SystemExit(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise SystemExit(f"invalid JSON in {path}: {exc}")


def cmd_synth(args):
    spec_dict = _load_json(args.spec) if args.spec else {}
    spec = _dataclass_from_dict(PhantomSpec, spec_dict, "phantom spec")
    corpus = synth_corpus(spec, args.cases)
    manifest = write_corpus(corpus, args.out, n_train=args.train, extra={"phantom_seed": spec.seed})
    print(f"wrote {args.cases} cases ({args.train} train) -> {manifest}")


def cmd_train(args):
    config = _load_json(args.config)
    net_cfg = _dataclass_from_dict(NetworkConfig, config.get("network", {}), "network")
    train_dict = dict(config.get("training", {}))
    if "learning_rate" not in train_dict and net_cfg.head == "affine":
        train_dict["learning_rate"] = AFFINE_DEFAULT_LR
    cfg = _dataclass_from_dict(TrainConfig, train_dict, "training")
    manifest = load_manifest(args.corpus)
    indices = manifest["train_cases"]
    corpus = load_corpus(args.corpus, indices=indices)
    print(f"training on {len(corpus)} cases for {cfg.iterations} iterations")
    result = train(corpus, net_cfg, cfg, out_dir=args.out, resume=args.resume, log_every=args.log_every)
    last = result.trace[-1] if result.trace else None
    if last:
        print(f"final loss {last[3]:.5f} (similarity {last[1]:.5f}, regularizer {last[2]:.5f})")
    print(f"checkpoint: {result.checkpoint}")


def cmd_register(args):
    moving = read_volume(args.moving)
    fixed = read_volume(args.fixed)
    ddf = register_pair(args.checkpoint, moving, fixed)
    write_volume(ddf, args.out)
    print(f"wrote displacement field -> {args.out}")
    if args.warped:
        write_volume(warp(moving, ddf), args.warped)
        print(f"wrote warped moving image -> {args.warped}")


def cmd_warp(args):
    source = read_label(args.input) if args.label else read_volume(args.input)
    ddf = read_volume(args.ddf)
    if not hasattr(ddf, "data") or ddf.data.ndim != 4:
        raise SystemExit(f"{args.ddf} is not a displacement field")
    write_volume(warp(source, ddf), args.out)
    print(f"wrote warped output -> {args.out}")


def cmd_evaluate(args):
    manifest = load_manifest(args.corpus)
    train_set, heldout_set = audit_split(manifest)
    if args.split == "heldout":
        indices = sorted(heldout_set)
    elif args.split == "train":
        indices = sorted(train_set)
    else:
        indices = None
    corpus = load_corpus(args.corpus, indices=indices)
    net, _ = load_checkpoint(args.checkpoint)
    report = evaluate(
        net,
        corpus,
        maps_dir=args.maps,
        metadata={"checkpoint": str(args.checkpoint), "split": args.split},
    )
    write_report(report, args.report)
    tre = report.tre_mm.get("median")
    dsc = report.dsc.get("median")
    print(
        f"evaluated {report.n_cases} cases: median TRE "
        f"{tre:.3f} mm, median DSC {dsc:.3f}, "
        f"negative-Jacobian voxels {report.negative_jacobian_voxels}"
    )
    print(f"report -> {args.report}")


def cmd_inspect(args):
    ddf = read_volume(args.ddf)
    if not hasattr(ddf, "data") or ddf.data.ndim != 4:
        raise SystemExit(f"{args.ddf} is not a displacement field")
    out = Path(args.out)
    write_volume(jacobian_determinant_map(ddf), out / "jacobian_det")
    write_volume(displacement_magnitude_map(ddf), out / "displacement_magnitude")
    write_volume(gradient_l2norm_map(ddf), out / "gradient_l2norm")
    neg = int((jacobian_determinant_map(ddf).data < 0).sum())
    print(f"wrote J/D/G maps -> {out} (negative-Jacobian voxels: {neg})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakreg",
        description="Weakly-supervised deformable 3D registration toolkit",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom corpus")
    p.add_argument("--spec", help="phantom spec JSON (defaults when omitted)")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--cases", type=int, default=26)
    p.add_argument("--train", type=int, default=20, help="cases assigned to the training split")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a registration network")
    p.add_argument("--config", required=True, help="JSON with 'network' and 'training' sections")
    p.add_argument("--corpus", required=True, help="corpus manifest JSON")
    p.add_argument("--out", required=True, help="output directory for checkpoints and the loss trace")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="predict the field aligning moving to fixed")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out", required=True, help="output displacement field path")
    p.add_argument("--warped", help="also write the warped moving image here")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("warp", help="apply a stored displacement field")
    p.add_argument("--input", required=True)
    p.add_argument("--ddf", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", action="store_true", help="treat the input as a label mask")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", required=True, help="output report JSON path")
    p.add_argument("--maps", help="directory for per-case inspection maps")
    p.add_argument("--split", choices=("heldout", "train", "all"), default="heldout")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="write Jacobian/magnitude/gradient maps of a field")
    p.add_argument("--ddf", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args.func(args)


if __name__ == "__main__":
    main()
