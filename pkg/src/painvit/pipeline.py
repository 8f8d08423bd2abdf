"""End-to-end orchestration: extraction, diagram construction, train, eval.

The first model never trains here: it is calibrated (normalization
statistics only) on a slice of the data it will embed, then frozen.  Every
modality reduces to a waveform diagram of the aggregated embeddings, and
the second model trains as an ordinary image classifier on those diagrams.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import Dataset, SampleRecord, load_frames
from .errors import ConfigurationError
from .fusion import (
    ADDITION,
    CONCATENATION,
    SINGLE_DIAGRAM,
    extract_fnirs_embeddings,
    extract_video_embeddings,
    fuse_modalities_addition,
    fuse_modalities_concatenation,
    fuse_modalities_single_diagram,
)
from .model import PROFILES, PainViT
from .numerics import Tensor
from .training import Metrics, evaluate, restore_state, train
from .waveform import Series, render, series_from_vector


def build_model(profile: str, seed: int) -> PainViT:
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown model profile {profile!r}")
    return PainViT(PROFILES[profile], seed=seed)


def calibrate(model: PainViT, images, batch_size: int = 32) -> None:
    """Populate normalization statistics with training-mode forwards."""
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            batch = np.stack(
                [np.asarray(img, dtype=np.float64) for img in images[start : start + batch_size]]
            )
            model.forward(Tensor(batch), training=True)


def calibration_images(dataset: Dataset, modality: str, samples: int = 2) -> list:
    """A small mixed slice of frames and channel diagrams for calibration."""
    images: list = []
    for record in dataset.samples[: max(1, samples)]:
        if modality in ("video", "fusion"):
            images.extend(load_frames(record))
        if modality != "video":
            channel_modality = "fnirs-hbo" if modality == "fusion" else modality
            for values in dataset.channel_values(record, channel_modality):
                diagram = render(Series(values, _series_label(channel_modality)))
                images.append(np.repeat(diagram.pixels, 3, axis=0))
    return images


def _series_label(modality: str) -> str:
    return "fnirs-hbr" if modality == "fnirs-hbr" else "fnirs-hbo"


def sample_embeddings(
    dataset: Dataset, record: SampleRecord, model1: PainViT, modality: str, method: str
) -> dict:
    """Per-modality embedding sets for one sample."""
    sets: dict = {}
    if modality in ("video", "fusion"):
        sets["video"] = extract_video_embeddings(list(load_frames(record)), model1, method)
    if modality != "video":
        channel_modality = "fnirs-hbo" if modality == "fusion" else modality
        label = _series_label(channel_modality)
        channels = [
            Series(values, label) for values in dataset.channel_values(record, channel_modality)
        ]
        sets["fnirs"] = extract_fnirs_embeddings(channels, model1, method)
    return sets


def diagram_for_sample(sets: dict, modality: str, fusion: str) -> np.ndarray:
    """The image the second model consumes, as [C, 224, 224] pixels.

    Unimodal paths render the aggregated vector as a single-stroke diagram.
    The fusion path combines modalities by vector addition or concatenation
    (then renders) or by co-plotting both strokes in one diagram.
    """
    if modality == "fusion":
        video, fnirs = sets["video"], sets["fnirs"]
        if fusion == SINGLE_DIAGRAM:
            return fuse_modalities_single_diagram(video, fnirs).pixels
        if fusion == ADDITION:
            fused = fuse_modalities_addition(video, fnirs)
        elif fusion == CONCATENATION:
            fused = fuse_modalities_concatenation(video, fnirs)
        else:
            raise ConfigurationError(f"unknown fusion method {fusion!r}")
        label = "video-embedding"
    else:
        only = next(iter(sets.values()))
        fused = only.fused
        label = "video-embedding" if only.modality == "video" else "fnirs-embedding"
    return render(series_from_vector(fused, label)).pixels


def aggregation_method(modality: str, fusion: str) -> str:
    """Per-item aggregation within a modality.

    Unimodal runs aggregate per the selected method; the fusion paths sum
    per modality first (concatenating 30 frames against 24 channels would
    misalign the modalities).
    """
    if modality == "fusion":
        return ADDITION
    return CONCATENATION if fusion == CONCATENATION else ADDITION


def build_diagrams(
    dataset: Dataset,
    model1: PainViT,
    modality: str,
    fusion: str,
) -> tuple:
    """Diagram image + label arrays for a whole dataset.

    Stroke pixels are binary, so diagrams are stored as uint8 and widened to
    float64 batch by batch during training.
    """
    method = aggregation_method(modality, fusion)
    images, labels = [], []
    for record in dataset.samples:
        sets = sample_embeddings(dataset, record, model1, modality, method)
        pixels = diagram_for_sample(sets, modality, fusion)
        images.append(np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8))
        labels.append(record.label)
    return images, np.array(labels, dtype=np.int64)


def diagram_to_input(image: np.ndarray, in_channels: int) -> np.ndarray:
    pixels = np.asarray(image, dtype=np.float64) / 255.0
    if pixels.shape[0] == 1 and in_channels == 3:
        pixels = np.repeat(pixels, 3, axis=0)
    return pixels


class DiagramStack:
    """List-like view that widens stored uint8 diagrams on access."""

    def __init__(self, images, in_channels: int):
        self.images = images
        self.in_channels = in_channels

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return np.stack(
                [diagram_to_input(img, self.in_channels) for img in self.images[index]]
            )
        return diagram_to_input(self.images[index], self.in_channels)


def write_history_csv(path, history) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "lr", "train_loss", "val_accuracy", "val_macro_precision",
             "val_macro_recall", "val_macro_f1"]
        )
        for record in history:
            row = [record.epoch, f"{record.lr:.10g}", f"{record.train_loss:.10g}"]
            if record.val is not None:
                row += [
                    f"{record.val.accuracy:.10g}",
                    f"{record.val.macro_precision:.10g}",
                    f"{record.val.macro_recall:.10g}",
                    f"{record.val.macro_f1:.10g}",
                ]
            else:
                row += ["", "", "", ""]
            writer.writerow(row)


def write_metrics_csv(path, metrics: Metrics) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["accuracy", "macro_precision", "macro_recall", "macro_f1"])
        writer.writerow(
            [f"{metrics.accuracy:.10g}", f"{metrics.macro_precision:.10g}",
             f"{metrics.macro_recall:.10g}", f"{metrics.macro_f1:.10g}"]
        )


def train_pipeline(
    train_set: Dataset,
    val_set: Optional[Dataset],
    config: RunConfig,
    out_dir,
    model1: Optional[PainViT] = None,
    diagrams=None,
    on_epoch=None,
):
    """Full training run; returns (history, final validation metrics, run dir).

    ``model1`` and ``diagrams`` allow reuse of a calibrated extractor and
    prebuilt diagram stacks across runs that share them (sweeps).
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "run-config.json")

    if model1 is None:
        model1 = build_model(config.profile, config.seed)
        calibrate(model1, calibration_images(train_set, config.modality))
    if diagrams is None:
        train_images, train_labels = build_diagrams(
            train_set, model1, config.modality, config.fusion
        )
        if val_set is not None:
            val_images, val_labels = build_diagrams(
                val_set, model1, config.modality, config.fusion
            )
        else:
            val_images, val_labels = [], None
    else:
        train_images, train_labels, val_images, val_labels = diagrams

    model2 = build_model(config.profile, config.seed + 1)
    in_channels = model2.config.in_channels
    rng = np.random.default_rng(config.seed)
    train_view = DiagramStack(train_images, in_channels)
    val_view = DiagramStack(val_images, in_channels) if len(val_images) else None
    history, best_state = train(
        model2,
        train_view,
        train_labels,
        config.train,
        rng,
        augment=config.augment,
        val_images=val_view,
        val_labels=val_labels,
        on_epoch=on_epoch,
    )
    restore_state(model2, best_state)
    save_checkpoint(model1, out_dir / "model1.npz")
    save_checkpoint(model2, out_dir / "model2.npz")
    write_history_csv(out_dir / "history.csv", history)
    final: Optional[Metrics] = None
    if val_view is not None:
        final = evaluate(model2, val_view, val_labels, config.train.batch_size)
        write_metrics_csv(out_dir / "metrics.csv", final)
    return history, final, out_dir


def eval_pipeline(dataset: Dataset, run_dir, out_path=None) -> Metrics:
    """Evaluate the checkpoints of a finished run on a dataset."""
    run_dir = Path(run_dir)
    config = RunConfig.load(run_dir / "run-config.json")
    model1 = load_checkpoint(run_dir / "model1.npz")
    model2 = load_checkpoint(run_dir / "model2.npz")
    images, labels = build_diagrams(dataset, model1, config.modality, config.fusion)
    view = DiagramStack(images, model2.config.in_channels)
    metrics = evaluate(model2, view, labels, config.train.batch_size)
    if out_path is not None:
        write_metrics_csv(out_path, metrics)
    return metrics
