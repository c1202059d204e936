"""Command-line interface: gen, train, eval, bench, export-embeddings.

Every command is an independent process writing its outputs atomically
(temp file + rename). ``train`` writes a run manifest with the fully
resolved configuration before any compute, so a run is reproducible from
the manifest alone. Exit codes: 0 success, 2 configuration error,
3 data/format error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .audit import audit_csv, bench_heads
from .backbones import BackboneSpec
from .data import DatasetSpec, batches, generate, load_qten_dataset, save_dataset
from .errors import (ConfigError, DataError, DimensionError, DivergenceError,
                     FormatError, ResourceError, UsageError)
from .fileio import atomic_write_text
from .heads import HeadKind
from .tensor import no_grad
from .training import (Checkpoint, config_from_dict, config_to_dict, confusion_to_csv,
                       evaluate, log_to_csv, model_from_checkpoint, report_to_json,
                       train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="quic",
        description="Train and audit linear-plus-interaction classification heads.")
    parser.add_argument("--version", action="version", version=f"quic {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset directory")
    gen.add_argument("--kind", choices=["cooc", "texture"], required=True)
    gen.add_argument("--classes", type=int, default=2)
    gen.add_argument("--per-class", type=int, default=1000)
    gen.add_argument("--dim", type=int, default=32, help="feature dim (cooc)")
    gen.add_argument("--image-size", type=int, default=24, help="image side (texture)")
    gen.add_argument("--motif-size", type=int, default=6, help="stamp side (texture)")
    gen.add_argument("--noise", type=float, default=0.3)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--train-frac", type=float, default=0.8)
    gen.add_argument("--pairs", type=str, default=None,
                     help="comma-separated feature pairs like 0:1,2:3 (cooc)")
    gen.add_argument("--out", required=True)
    gen.add_argument("--force", action="store_true",
                     help="write into an existing non-empty directory")

    tr = sub.add_parser("train", help="train a head (and backbone) on a dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", default=None, help="JSON config file")
    tr.add_argument("--head", choices=[k.value for k in HeadKind], default=None)
    tr.add_argument("--backbone", choices=["identity", "mlp", "tiny_cnn"], default=None)
    tr.add_argument("--mlp-widths", type=str, default=None, help="e.g. 64,32")
    tr.add_argument("--cnn-channels", type=str, default=None, help="e.g. 16,32,64")
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--momentum", type=float, default=None)
    tr.add_argument("--weight-decay", type=float, default=None)
    tr.add_argument("--lr-decay-factor", type=float, default=None)
    tr.add_argument("--lr-decay-every", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--l2-normalize", action="store_true", default=None)
    tr.add_argument("--a-init", choices=["zeros", "normal"], default=None)
    tr.add_argument("--no-bn", action="store_true", default=None,
                    help="disable batch norm in the quic head")
    tr.add_argument("--bias-inside-bn", action="store_true", default=None)
    tr.add_argument("--freeze-a", action="store_true", default=None,
                    help="exclude the interaction tensor from updates")
    tr.add_argument("--se-reduction", type=int, default=None)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", choices=["test", "train", "all"], default="test")
    ev.add_argument("--out", required=True)

    be = sub.add_parser("bench", help="benchmark all head kinds at one size")
    be.add_argument("--dim", type=int, default=512)
    be.add_argument("--classes", type=int, default=200)
    be.add_argument("--batch", type=int, default=16)
    be.add_argument("--trials", type=int, default=7)
    be.add_argument("--out", required=True)

    ex = sub.add_parser("export-embeddings",
                        help="write backbone features per sample to CSV")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--split", choices=["all", "test", "train"], default="all")
    ex.add_argument("--out", required=True)
    return parser


def _parse_pairs(text):
    pairs = []
    for part in text.split(","):
        bits = part.split(":")
        if len(bits) != 2:
            raise ConfigError(f"bad pair {part!r}; expected i:j")
        pairs.append((int(bits[0]), int(bits[1])))
    return tuple(pairs)


def _parse_ints(text, what):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad {what} {text!r}; expected comma-separated ints") from None


def cmd_gen(args):
    if os.path.exists(args.out) and os.listdir(args.out) and not args.force:
        raise ConfigError(
            f"output directory {args.out!r} is not empty (use --force to overwrite)")
    kind = "cooc_tabular" if args.kind == "cooc" else "texture_pair_image"
    spec = DatasetSpec(
        kind=kind, num_classes=args.classes, per_class=args.per_class,
        feature_dim=args.dim, image_size=args.image_size,
        motif_size=args.motif_size, noise=args.noise, seed=args.seed,
        train_frac=args.train_frac,
        pairs=_parse_pairs(args.pairs) if args.pairs else None)
    dataset = generate(spec)
    save_dataset(args.out, dataset)
    print(f"wrote {len(dataset.labels)} samples "
          f"({dataset.num_classes} classes) to {args.out}")
    return EXIT_OK


def _resolve_train_config(args):
    cfg_dict = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                cfg_dict = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config!r} not found") from None
        except json.JSONDecodeError as e:
            raise FormatError(f"{args.config}: bad JSON: {e}") from None
    cfg = config_from_dict(cfg_dict)

    flag_map = {"epochs": "epochs", "batch_size": "batch_size", "lr": "lr0",
                "momentum": "momentum", "weight_decay": "weight_decay",
                "lr_decay_factor": "lr_decay_factor",
                "lr_decay_every": "lr_decay_every", "seed": "seed",
                "a_init": "a_init", "se_reduction": "se_reduction"}
    updates = {}
    for arg_name, cfg_name in flag_map.items():
        value = getattr(args, arg_name)
        if value is not None:
            updates[cfg_name] = value
    if args.head is not None:
        updates["head"] = HeadKind(args.head)
    backbone = cfg.backbone
    if args.backbone is not None:
        backbone = BackboneSpec(kind=args.backbone,
                                mlp_widths=backbone.mlp_widths,
                                cnn_channels=backbone.cnn_channels)
    if args.mlp_widths is not None:
        backbone = BackboneSpec(kind=backbone.kind,
                                mlp_widths=_parse_ints(args.mlp_widths, "mlp widths"),
                                cnn_channels=backbone.cnn_channels)
    if args.cnn_channels is not None:
        backbone = BackboneSpec(kind=backbone.kind,
                                mlp_widths=backbone.mlp_widths,
                                cnn_channels=_parse_ints(args.cnn_channels, "cnn channels"))
    updates["backbone"] = backbone
    if args.l2_normalize:
        updates["l2_normalize"] = True
    if args.no_bn:
        updates["bn_enabled"] = False
    if args.bias_inside_bn:
        updates["bias_inside_bn"] = True
    if args.freeze_a:
        updates["freeze_a"] = True
    from dataclasses import replace

    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def cmd_train(args):
    data = load_qten_dataset(args.data)
    cfg = _resolve_train_config(args)
    os.makedirs(args.out, exist_ok=True)
    paths = {"manifest": os.path.join(args.out, "manifest.json"),
             "checkpoint": os.path.join(args.out, "checkpoint.qtck"),
             "log": os.path.join(args.out, "train_log.csv")}
    manifest = {"command": "train", "tool_version": __version__,
                "seed": cfg.seed, "config": config_to_dict(cfg),
                "dataset": os.path.abspath(args.data),
                "dataset_meta": data.meta,
                "artifacts": {k: os.path.abspath(v) for k, v in paths.items()}}
    atomic_write_text(paths["manifest"],
                      json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    try:
        result = train(data, cfg)
    except DivergenceError as e:
        if e.checkpoint is not None:
            e.checkpoint.save(paths["checkpoint"])
            print(f"divergence: saved last good checkpoint to {paths['checkpoint']}",
                  file=sys.stderr)
        raise
    result.checkpoint.save(paths["checkpoint"])
    atomic_write_text(paths["log"], log_to_csv(result.log))
    final = result.log[-1].test_top1 if result.log else float("nan")
    print(f"trained {cfg.head.value} head for {cfg.epochs} epochs; "
          f"final test top-1 {final:.4f}; artifacts in {args.out}")
    return EXIT_OK


def _select_split(data, split):
    return {"test": data.test, "train": data.train, "all": data.full}[split]


def _load_model_for(args, data):
    ckpt = Checkpoint.load(args.checkpoint)
    if tuple(ckpt.meta.get("sample_shape", ())) != data.sample_shape:
        raise ConfigError(
            f"checkpoint expects samples of shape "
            f"{tuple(ckpt.meta.get('sample_shape', ()))}, dataset has {data.sample_shape}")
    if int(ckpt.meta.get("num_classes", -1)) != data.num_classes:
        raise ConfigError(
            f"checkpoint has {ckpt.meta.get('num_classes')} classes, "
            f"dataset has {data.num_classes}")
    model, _ = model_from_checkpoint(ckpt)
    return model


def cmd_eval(args):
    data = load_qten_dataset(args.data)
    model = _load_model_for(args, data)
    report = evaluate(model, _select_split(data, args.split))
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "report.json"), report_to_json(report))
    atomic_write_text(os.path.join(args.out, "confusion.csv"), confusion_to_csv(report))
    print(f"top-1 {report.top1:.4f} on {args.split} split; report in {args.out}")
    return EXIT_OK


def cmd_bench(args):
    rows = bench_heads(args.dim, args.classes, batch=args.batch, trials=args.trials)
    atomic_write_text(args.out, audit_csv(rows))
    for r in rows:
        print(f"{r.head}: params={r.params} peak_act={r.peak_act_elems} "
              f"macs={r.macs_per_sample} median={r.fwd_bwd_ms_median:.3f} ms")
    return EXIT_OK


def cmd_export_embeddings(args):
    data = load_qten_dataset(args.data)
    model = _load_model_for(args, data)
    subset = _select_split(data, args.split)
    width = model.backbone.out_features
    lines = ["label," + ",".join(f"f{i}" for i in range(width))]
    with no_grad():
        for batch in batches(subset, 256):
            z, _ = model.backbone.forward(batch.inputs, mode="eval")
            for label, row in zip(batch.labels, z.data):
                lines.append(f"{int(label)}," + ",".join(f"{v:.9g}" for v in row))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(subset)} embedding rows to {args.out}")
    return EXIT_OK


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
             "bench": cmd_bench, "export-embeddings": cmd_export_embeddings}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, UsageError, DimensionError, ResourceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
