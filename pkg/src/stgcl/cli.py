"""Command-line surface: synth | pretrain | linear-eval | embed.

Every command takes --seed and is end-to-end reproducible: rerunning with
identical flags produces byte-identical artifacts.  A JSON config file can
supply defaults (--config); explicit flags win.  The resolved configuration
(plus its hash) is written next to every artifact.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import pipeline
from .augment import AUGMENTATION_KINDS, AugmentationConfig
from .dataio import (DatasetManifest, SequenceStore, SynthConfig, load_dataset,
                     save_dataset, split_dataset, synth_generate)
from .errors import ContractViolation, DataError, NumericError, StgclError
from .model import EncoderConfig, load_encoder, save_encoder
from .optim import LrSchedule
from .pipeline import (LinearEvalConfig, PretrainConfig, TrainingSet,
                       config_digest, linear_eval, pretrain, random_encoder)

LOSS_CHOICES = {
    "global": ("global",),
    "temlocal": ("temporal",),
    "spalocal": ("spatial",),
    "global+temlocal": ("global", "temporal"),
    "global+spalocal": ("global", "spatial"),
    "global+temlocal+spalocal": ("global", "temporal", "spatial"),
}

AUG_FLAG_TO_KIND = {kind.replace("_", "-"): kind for kind in AUGMENTATION_KINDS}


class UsageError(StgclError):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part != "")
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stgcl",
        description="Multi-view skeleton contrastive representation learning")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    synth.add_argument("--config", type=Path, help="JSON file with flag defaults")
    synth.add_argument("--classes", type=int, default=8)
    synth.add_argument("--per-class", type=int, default=25)
    synth.add_argument("--subjects", type=int, default=10)
    synth.add_argument("--views", type=int, default=2)
    synth.add_argument("--frames", type=int, default=100)
    synth.add_argument("--noise-sigma", type=float, default=0.03)
    synth.add_argument("--occlusion-prob", type=float, default=0.15)
    synth.add_argument("--offset-range", type=int, default=8)
    synth.add_argument("--translation-range", type=float, default=0.4)
    synth.add_argument("--view-tilt-deg", type=float, default=8.0)
    synth.add_argument("--amplitude-jitter", type=float, default=0.25)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("-o", "--out", type=Path, required=True)

    pre = sub.add_parser("pretrain", help="contrastive pretraining")
    pre.add_argument("--config", type=Path)
    pre.add_argument("--data", type=Path, required=True)
    pre.add_argument("--out", type=Path, required=True)
    pre.add_argument("--mode", choices=("mv", "sv"), default="mv")
    pre.add_argument("--protocol", choices=("cross-subject", "cross-view"),
                     default="cross-subject")
    pre.add_argument("--epochs", type=int, default=40)
    pre.add_argument("--batch-size", type=int, default=16)
    pre.add_argument("--lr", type=float, default=0.1)
    pre.add_argument("--lr-drops", type=_int_list, default=(20, 30, 35))
    pre.add_argument("--momentum", type=float, default=0.9)
    pre.add_argument("--tau", type=float, default=0.07)
    pre.add_argument("--subgraphs", type=int, default=5)
    pre.add_argument("--loss", choices=sorted(LOSS_CHOICES), default="global+temlocal")
    pre.add_argument("--local-denominator", choices=("literal", "stated-count"),
                     default="literal")
    pre.add_argument("--combine", choices=("uncertainty", "linear"),
                     default="uncertainty")
    pre.add_argument("--aug", choices=sorted(AUG_FLAG_TO_KIND),
                     default="temporal-subgraph")
    pre.add_argument("--encoder-channels", type=_int_list, default=(64, 64, 128, 256))
    pre.add_argument("--encoder-strides", type=_int_list, default=(1, 1, 2, 2))
    pre.add_argument("--temporal-kernel", type=int, default=9)
    pre.add_argument("--proj-hidden", type=int, default=256)
    pre.add_argument("--proj-dim", type=int, default=512)
    pre.add_argument("--alpha", type=float, default=0.001)
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--resume", action="store_true",
                     help="continue from the rolling checkpoint in --out")
    pre.add_argument("--workers", type=int, default=1,
                     help="upper bound on intra-run parallelism (execution is "
                          "currently sequential)")

    lev = sub.add_parser("linear-eval", help="frozen-encoder linear evaluation")
    lev.add_argument("--config", type=Path)
    lev.add_argument("--data", type=Path, required=True)
    lev.add_argument("--checkpoint", type=Path)
    lev.add_argument("--random-encoder", action="store_true",
                     help="evaluate a frozen randomly initialized encoder")
    lev.add_argument("--protocol", choices=("cross-subject", "cross-view"),
                     default="cross-subject")
    lev.add_argument("--epochs", type=int, default=45)
    lev.add_argument("--batch-size", type=int, default=16)
    lev.add_argument("--lr", type=float, default=0.1)
    lev.add_argument("--lr-drops", type=_int_list, default=(25, 35, 40))
    lev.add_argument("--momentum", type=float, default=0.9)
    lev.add_argument("--encoder-channels", type=_int_list, default=(64, 64, 128, 256))
    lev.add_argument("--encoder-strides", type=_int_list, default=(1, 1, 2, 2))
    lev.add_argument("--temporal-kernel", type=int, default=9)
    lev.add_argument("--alpha", type=float, default=0.001)
    lev.add_argument("--seed", type=int, default=0)
    lev.add_argument("--out", type=Path, required=True,
                     help="path of the JSON evaluation report")

    emb = sub.add_parser("embed", help="export representation vectors as CSV")
    emb.add_argument("--config", type=Path)
    emb.add_argument("--data", type=Path, required=True)
    emb.add_argument("--checkpoint", type=Path, required=True)
    emb.add_argument("--split", choices=("all", "train", "test"), default="all")
    emb.add_argument("--protocol", choices=("cross-subject", "cross-view"),
                     default="cross-subject")
    emb.add_argument("--out", type=Path, required=True)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Use a JSON config (if given) as flag defaults; explicit flags win."""
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    if at + 1 >= len(argv):
        raise UsageError("--config requires a path")
    path = Path(argv[at + 1])
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        overrides = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(overrides, dict):
        raise DataError(f"{path}: config must be a JSON object")
    known = {}
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        known[dest] = tuple(value) if isinstance(value, list) else value
    for action in parser._subparsers._group_actions:  # set on every subparser
        for sub in action.choices.values():
            sub.set_defaults(**known)
    return argv


def _encoder_config(channels: tuple[int, ...], strides: tuple[int, ...],
                    kernel: int) -> EncoderConfig:
    if len(channels) != len(strides):
        raise UsageError("--encoder-channels and --encoder-strides must have "
                         "the same length")
    blocks = []
    cin = 3
    for cout, stride in zip(channels, strides):
        blocks.append((cin, cout, stride))
        cin = cout
    return EncoderConfig(blocks=tuple(blocks), temporal_kernel=kernel,
                         output_dim=channels[-1])


def _resolved_config(args: argparse.Namespace) -> dict:
    doc = {}
    for key, value in sorted(vars(args).items()):
        if key == "config":
            value = str(value) if value else None
        elif isinstance(value, Path):
            value = str(value)
        doc[key] = value
    digest_doc = json.dumps(doc, sort_keys=True)
    import hashlib
    doc["config_hash"] = hashlib.sha256(digest_doc.encode("utf-8")).hexdigest()
    return doc


def _write_resolved_config(args: argparse.Namespace, path: Path) -> dict:
    doc = _resolved_config(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return doc


def _protocol_name(flag: str) -> str:
    return flag.replace("-", "_")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = SynthConfig(
        num_classes=args.classes, samples_per_class=args.per_class,
        num_subjects=args.subjects, num_frames=args.frames,
        num_views=args.views, noise_sigma=args.noise_sigma,
        occlusion_prob=args.occlusion_prob,
        temporal_offset_range=args.offset_range,
        translation_range=args.translation_range,
        view_tilt_deg=args.view_tilt_deg,
        amplitude_jitter=args.amplitude_jitter, seed=args.seed)
    manifest, store = synth_generate(config)
    save_dataset(manifest, store, args.out)
    _write_resolved_config(args, args.out / "synth_config.json")
    print(f"wrote {len(manifest.samples)} samples x {manifest.num_views} views "
          f"to {args.out}")
    return 0


def _pretrain_config(args) -> PretrainConfig:
    return PretrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        lr_schedule=LrSchedule(args.lr, tuple(args.lr_drops), 10.0),
        momentum=args.momentum, tau=args.tau, num_subgraphs=args.subgraphs,
        num_views=2, mode="multi_view" if args.mode == "mv" else "single_view",
        loss_terms=LOSS_CHOICES[args.loss],
        local_mode=args.local_denominator.replace("-", "_"),
        combine=args.combine,
        augmentation=AugmentationConfig(kind=AUG_FLAG_TO_KIND[args.aug]),
        encoder=_encoder_config(args.encoder_channels, args.encoder_strides,
                                args.temporal_kernel),
        proj_hidden=args.proj_hidden, proj_dim=args.proj_dim,
        alpha=args.alpha, seed=args.seed)


def cmd_pretrain(args) -> int:
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    try:
        config = _pretrain_config(args)
    except ContractViolation as exc:
        raise UsageError(str(exc)) from exc
    manifest, store = load_dataset(args.data)
    split = split_dataset(manifest, _protocol_name(args.protocol))
    train_set = TrainingSet.from_split(manifest, store, split)
    if config.mode == "multi_view":
        short = [sid for sid in train_set.sample_ids
                 if len(train_set.views_per_sample[sid]) < 2]
        if short:
            raise UsageError(
                f"--mode mv needs 2 training views per sample; {len(short)} "
                f"sample(s) have fewer (e.g. {short[0]!r})")

    out_dir = Path(args.out)
    _write_resolved_config(args, out_dir / "run_config.json")
    encoder, reports = pretrain(train_set, config, out_dir=out_dir,
                                resume=args.resume)
    save_encoder(out_dir / "encoder.stgc", encoder)
    print(f"pretrained {len(reports)} epoch(s); encoder at {out_dir / 'encoder.stgc'}")
    return 0


def cmd_linear_eval(args) -> int:
    if args.random_encoder == (args.checkpoint is not None):
        raise UsageError("provide exactly one of --checkpoint or --random-encoder")
    manifest, store = load_dataset(args.data)
    split = split_dataset(manifest, _protocol_name(args.protocol))

    if args.random_encoder:
        base = PretrainConfig(
            encoder=_encoder_config(args.encoder_channels, args.encoder_strides,
                                    args.temporal_kernel),
            alpha=args.alpha, seed=args.seed)
        encoder = random_encoder(manifest, base)
    else:
        if not Path(args.checkpoint).exists():
            raise DataError(f"checkpoint not found: {args.checkpoint}")
        encoder = load_encoder(args.checkpoint)
        if encoder.topology.num_joints != manifest.num_joints:
            raise UsageError(
                f"checkpoint topology has {encoder.topology.num_joints} joints, "
                f"dataset has {manifest.num_joints}")

    eval_config = LinearEvalConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        lr_schedule=LrSchedule(args.lr, tuple(args.lr_drops), 10.0),
        momentum=args.momentum, seed=args.seed)
    result = linear_eval(encoder, manifest, store, split, eval_config,
                         target_len=manifest.num_frames)

    doc = _resolved_config(args)
    report = {
        "top1": result.top1,
        "per_class": result.per_class,
        "num_test": result.num_test,
        "config_hash": doc["config_hash"],
        "seed": args.seed,
    }
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    _write_resolved_config(args, out_path.with_suffix(".config.json"))
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_embed(args) -> int:
    manifest, store = load_dataset(args.data)
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    encoder = load_encoder(args.checkpoint)
    if encoder.topology.num_joints != manifest.num_joints:
        raise UsageError(
            f"checkpoint topology has {encoder.topology.num_joints} joints, "
            f"dataset has {manifest.num_joints}")

    if args.split == "all":
        pairs = [(rec.sample_id, v) for rec in manifest.samples
                 for v in range(manifest.num_views)]
    else:
        split = split_dataset(manifest, _protocol_name(args.protocol))
        pairs = split.train_pairs if args.split == "train" else split.test_pairs
    pairs = sorted(pairs)

    vectors = pipeline.embed_pairs(encoder, manifest, store, pairs,
                                   target_len=manifest.num_frames)
    labels = {rec.sample_id: rec.label for rec in manifest.samples}
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dim = vectors.shape[1] if len(vectors) else encoder.config.output_dim
    header = "id,view,label," + ",".join(f"h{i}" for i in range(dim))
    lines = [header]
    for (sid, view), row in zip(pairs, vectors):
        lines.append(",".join([sid, str(view), str(labels[sid])]
                              + [repr(float(x)) for x in row]))
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_resolved_config(args, out_path.with_suffix(".config.json"))
    print(f"wrote {len(pairs)} embedding rows to {out_path}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        handler = {
            "synth": cmd_synth,
            "pretrain": cmd_pretrain,
            "linear-eval": cmd_linear_eval,
            "embed": cmd_embed,
        }[args.command]
        return handler(args)
    except (UsageError, ContractViolation) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
