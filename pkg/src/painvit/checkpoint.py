"""Flat, versioned model checkpoint container.

One ``.npz`` archive holds every trainable tensor under ``param.<dotted
path>``, every normalization statistic under ``stats.<path>.{mean,var,init}``,
and a JSON metadata entry with the format version and the model
configuration.  Values are stored as raw float64, so a load/save cycle is
bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import PainViT, PainViTConfig

FORMAT_VERSION = 1


def save_checkpoint(model: PainViT, path) -> None:
    arrays = {}
    for name, param in model.named_parameters():
        arrays[f"param.{name}"] = param.data
    for name, stats in model.named_stats():
        arrays[f"stats.{name}.mean"] = stats.mean
        arrays[f"stats.{name}.var"] = stats.var
        arrays[f"stats.{name}.init"] = np.array([1.0 if stats.initialized else 0.0])
    meta = {
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(model.config),
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> PainViT:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if "meta" not in archive:
            raise DataError(f"{path} is not a model checkpoint (missing metadata)")
        meta = json.loads(str(archive["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise DataError(
                f"unsupported checkpoint version {meta.get('format_version')}"
            )
        config = PainViTConfig(**{k: _detuple(v) for k, v in meta["config"].items()})
        model = PainViT(config, seed=0)
        for name, param in model.named_parameters():
            key = f"param.{name}"
            if key not in archive:
                raise DataError(f"checkpoint missing parameter {name}")
            stored = archive[key]
            if stored.shape != param.data.shape:
                raise DataError(
                    f"checkpoint parameter {name} has shape {stored.shape}, "
                    f"expected {param.data.shape}"
                )
            param.data = stored.astype(np.float64)
        for name, stats in model.named_stats():
            stats.mean = archive[f"stats.{name}.mean"].astype(np.float64)
            stats.var = archive[f"stats.{name}.var"].astype(np.float64)
            stats.initialized = bool(archive[f"stats.{name}.init"][0])
    return model


def _detuple(value):
    return tuple(value) if isinstance(value, list) else value
