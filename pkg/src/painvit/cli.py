"""Command-line entry point.

Subcommands: synth-data, render-waveform, extract-embeddings, fuse, train,
eval, attention-map, count-params.  Every command takes ``--seed`` (and the
run-config file where applicable); all outputs are deterministic for a
fixed seed.  Exit codes: 0 success, 2 usage, 3 data error, 4 configuration
error, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint
from .config import MODALITIES, RunConfig
from .dataset import ALL_CHANNELS, SyntheticSpec, generate_dataset, ingest
from .errors import ConfigurationError, DataError, PainVitError
from .fusion import FUSION_METHODS, write_embeddings
from .model import (
    PROFILES,
    attention_weights,
    count_macs,
    count_params_analytic,
)
from .pipeline import (
    aggregation_method,
    build_model,
    calibrate,
    calibration_images,
    diagram_for_sample,
    eval_pipeline,
    sample_embeddings,
    train_pipeline,
)
from .waveform import Series, WaveformImage, render

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONFIG = 4
EXIT_OTHER = 1


def _add_config_args(parser):
    parser.add_argument("--config", help="run-config JSON file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="model size profile")
    parser.add_argument("--modality", choices=MODALITIES)
    parser.add_argument("--fusion", choices=FUSION_METHODS)


def _resolve_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    for name in ("seed", "profile", "modality", "fusion"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    for name in ("epochs", "lr", "batch_size", "label_smoothing"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config.train, name, value)
    if getattr(args, "warmup_epochs", None) is not None:
        config.train.warmup_epochs = args.warmup_epochs
    if getattr(args, "cooldown_epochs", None) is not None:
        config.train.cooldown_epochs = args.cooldown_epochs
    config.validate()
    return config


def cmd_synth_data(args) -> int:
    spec = SyntheticSpec(
        per_class=args.per_class,
        snr=args.snr,
        seed=args.seed if args.seed is not None else 0,
    )
    root = generate_dataset(spec, args.out)
    dataset = ingest(root)
    print(f"wrote {len(dataset)} samples to {root}")
    print(f"class counts: {dataset.class_counts()}")
    return EXIT_OK


def cmd_render_waveform(args) -> int:
    source = Path(getattr(args, "in"))
    if not source.exists():
        raise DataError(f"input file not found: {source}")
    with open(source, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or args.channel not in header:
            raise DataError(f"channel {args.channel!r} not present in {source}")
        column = header.index(args.channel)
        values = [float(row[column]) for row in reader if row]
    label = "fnirs-hbr" if args.channel.startswith("HbR") else "fnirs-hbo"
    image = render(Series(np.asarray(values), label))
    image.write_png(args.out)
    if args.text:
        image.write_text(args.text)
    print(f"rendered {args.channel} ({len(values)} samples) -> {args.out}")
    return EXIT_OK


def _prepare_extractor(args, config: RunConfig, dataset):
    if getattr(args, "model1", None):
        return load_checkpoint(args.model1)
    model1 = build_model(config.profile, config.seed)
    calibrate(model1, calibration_images(dataset, config.modality))
    return model1


def cmd_extract_embeddings(args) -> int:
    config = _resolve_config(args)
    dataset = ingest(args.data)
    model1 = _prepare_extractor(args, config, dataset)
    method = aggregation_method(config.modality, config.fusion)
    records = []
    for record in dataset.samples:
        sets = sample_embeddings(dataset, record, model1, config.modality, method)
        for embedding_set in sets.values():
            records.append((record.sample_id, embedding_set))
    write_embeddings(args.out, records)
    print(f"wrote embeddings for {len(dataset)} samples -> {args.out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    config = _resolve_config(args)
    dataset = ingest(args.data)
    model1 = _prepare_extractor(args, config, dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    method = aggregation_method(config.modality, config.fusion)
    for record in dataset.samples:
        sets = sample_embeddings(dataset, record, model1, config.modality, method)
        pixels = diagram_for_sample(sets, config.modality, config.fusion)
        WaveformImage(pixels).write_png(out_dir / f"{record.sample_id}.png")
    print(f"wrote {len(dataset)} fused diagrams -> {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_config(args)
    train_set = ingest(args.data)
    val_set = ingest(args.val_data) if args.val_data else None
    run_dir = config.run_dir(args.out)

    def progress(record):
        line = f"epoch {record.epoch:3d}  lr {record.lr:.3g}  loss {record.train_loss:.4f}"
        if record.val is not None:
            line += f"  val_acc {record.val.accuracy:.4f}"
        print(line, flush=True)

    history, metrics, run_dir = train_pipeline(
        train_set, val_set, config, run_dir, on_epoch=progress
    )
    print(f"run directory: {run_dir}")
    if metrics is not None:
        print(
            f"best-checkpoint validation: accuracy {metrics.accuracy:.4f} "
            f"macro_f1 {metrics.macro_f1:.4f}"
        )
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = ingest(args.data)
    out_path = Path(args.out) if args.out else Path(args.run_dir) / "eval-metrics.csv"
    metrics = eval_pipeline(dataset, args.run_dir, out_path)
    print(
        f"accuracy {metrics.accuracy:.4f}  macro_precision {metrics.macro_precision:.4f}  "
        f"macro_recall {metrics.macro_recall:.4f}  macro_f1 {metrics.macro_f1:.4f}"
    )
    print(f"metrics written to {out_path}")
    return EXIT_OK


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def cmd_attention_map(args) -> int:
    model = load_checkpoint(args.model)
    image = _load_image(Path(args.image))
    stage = args.stage if args.stage is not None else len(model.stages) - 1
    depth = args.depth if args.depth is not None else 0
    per_head = attention_weights(model, image, stage, depth)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(out_dir / "attention-weights.npz", **{
        f"head{j}": attn for j, attn in enumerate(per_head)
    })
    side = int(round(len(per_head[0]) ** 0.5))
    size = model.config.image_size
    base = (image.mean(axis=0) * 255.0).astype(np.uint8)
    for j, attn in enumerate(per_head):
        # row-averaged attention per token, upsampled over the input
        salience = attn.mean(axis=0).reshape(side, side)
        lo, hi = salience.min(), salience.max()
        norm = (salience - lo) / (hi - lo) if hi > lo else np.full_like(salience, 0.5)
        heat = np.kron(norm, np.ones((size // side, size // side)))
        overlay = np.stack(
            [
                np.clip(0.5 * base + 127.5 * heat, 0, 255).astype(np.uint8),
                (0.5 * base).astype(np.uint8),
                np.clip(0.5 * base + 127.5 * (1.0 - heat), 0, 255).astype(np.uint8),
            ],
            axis=2,
        )
        Image.fromarray(overlay, mode="RGB").save(out_dir / f"head{j}.png", format="PNG")
    print(f"stage {stage} depth {depth}: {len(per_head)} heads -> {out_dir}")
    return EXIT_OK


def cmd_count_params(args) -> int:
    profile = args.profile or "full"
    config = PROFILES[profile]
    params_by = count_params_analytic(config)
    macs = count_macs(config)
    params = params_by["total"]
    flops = macs["total"]
    print(f"profile: {profile}")
    print(f"{'component':<12} {'params':>12} {'mult-adds':>14}")
    for key in ("patch_embed", "stage1", "merge1", "stage2", "merge2", "stage3", "head"):
        print(f"{key:<12} {params_by.get(key, 0):>12,} {macs.get(key, 0):>14,}")
    for name in ("PainViT-1", "PainViT-2"):
        print(
            f"{name}: {params:,} params ({params / 1e6:.2f} M), "
            f"{flops:,} FLOPs ({flops / 1e9:.2f} G, 1 mult-add = 1 FLOP; "
            f"{2 * flops / 1e9:.2f} G at 2 FLOPs per mult-add)"
        )
    print(
        f"Twins total: {2 * params:,} params ({2 * params / 1e6:.2f} M), "
        f"{2 * flops:,} FLOPs ({2 * flops / 1e9:.2f} G)"
    )
    if args.json:
        payload = {
            "profile": profile,
            "per_model": {"params": params, "flops": flops, "macs": macs},
            "twins_total": {"params": 2 * params, "flops": 2 * flops},
        }
        Path(args.json).write_text(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="painvit",
        description="Twin vision transformers for multimodal pain assessment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset layout")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--snr", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("render-waveform", help="rasterize one recorded channel")
    p.add_argument("--in", dest="in", required=True, help="fnirs.csv file")
    p.add_argument("--channel", required=True, help=f"one of {ALL_CHANNELS[0]}..")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--text", help="optional portable text-grid path")
    p.set_defaults(func=cmd_render_waveform)

    p = sub.add_parser("extract-embeddings", help="embed every frame and channel")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model1", help="extractor checkpoint (fresh calibrated model otherwise)")
    _add_config_args(p)
    p.set_defaults(func=cmd_extract_embeddings)

    p = sub.add_parser("fuse", help="write the fused diagram for every sample")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--model1")
    _add_config_args(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", help="train the assessment model end to end")
    p.add_argument("--data", required=True, help="training dataset root")
    p.add_argument("--val-data", help="validation dataset root")
    p.add_argument("--out", help="run-directory root (env PAINVIT_RUN_ROOT otherwise)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    p.add_argument("--cooldown-epochs", dest="cooldown_epochs", type=int)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run on a dataset")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention-map", help="export per-head attention overlays")
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="input image (PNG)")
    p.add_argument("--stage", type=int, help="stage index (default: last)")
    p.add_argument("--depth", type=int, help="unit index within the stage (default: 0)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_attention_map)

    p = sub.add_parser("count-params", help="parameter and FLOP accounting")
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--json", help="also write the accounting as JSON")
    p.set_defaults(func=cmd_count_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PainVitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
