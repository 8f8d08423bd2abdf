"""Embedding extraction and the three fusion strategies.

The first model turns every video frame and every rendered fNIRS channel
into an embedding vector; per-modality aggregation is either an elementwise
sum (order-invariant) or an order-preserving concatenation.  Across
modalities, the aggregated vectors are summed, or co-plotted as a
two-stroke diagram consumed by the second model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import DataError, DimensionError, StateError
from .model import PainViT
from .numerics import Tensor
from .waveform import Series, WaveformImage, render, render_single_diagram, series_from_vector

ADDITION = "addition"
CONCATENATION = "concatenation"
SINGLE_DIAGRAM = "single-diagram"
FUSION_METHODS = (ADDITION, CONCATENATION, SINGLE_DIAGRAM)


@dataclass
class EmbeddingSet:
    """Ordered per-item embeddings plus their aggregated representation."""

    items: list
    fused: np.ndarray
    modality: str
    method: str

    @property
    def count(self) -> int:
        return len(self.items)


def aggregate(items: Sequence[np.ndarray], method: str) -> np.ndarray:
    if not items:
        raise DataError("cannot aggregate an empty embedding list")
    stacked = np.stack([np.asarray(v, dtype=np.float64) for v in items])
    if method == ADDITION:
        # correctly rounded per-coordinate sums: the result is exactly
        # order-independent, so permuting items cannot change the output
        return np.array(
            [math.fsum(stacked[:, i]) for i in range(stacked.shape[1])], dtype=np.float64
        )
    if method == CONCATENATION:
        return stacked.reshape(-1)
    raise DataError(f"unknown aggregation method {method!r}")


def adapt_channels(pixels: np.ndarray, in_channels: int) -> np.ndarray:
    """Match an image's channel count to the model: grayscale replicates."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise DimensionError(f"expected [C, H, W] image, got {pixels.shape}")
    if pixels.shape[0] == in_channels:
        return pixels
    if pixels.shape[0] == 1 and in_channels == 3:
        return np.repeat(pixels, 3, axis=0)
    raise DimensionError(
        f"cannot adapt {pixels.shape[0]}-channel image to {in_channels} channels"
    )


def embed_images(images: Sequence[np.ndarray], model: PainViT, batch_size: int = 32) -> np.ndarray:
    """Eval-mode pre-head embeddings, one row per image."""
    if not model.bn_initialized():
        raise StateError("model normalization statistics are uninitialized")
    rows = []
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = [
                adapt_channels(img, model.config.in_channels)
                for img in images[start : start + batch_size]
            ]
            embedding, _ = model.forward(Tensor(np.stack(chunk)), training=False)
            rows.append(embedding.data)
    return np.concatenate(rows, axis=0)


def extract_video_embeddings(
    frames: Sequence[np.ndarray],
    model1: PainViT,
    method: str = ADDITION,
    batch_size: int = 32,
) -> EmbeddingSet:
    """One embedding per frame, aggregated into the video representation."""
    if len(frames) == 0:
        raise DataError("video has no frames")
    embeddings = embed_images(list(frames), model1, batch_size)
    items = [row for row in embeddings]
    return EmbeddingSet(items, aggregate(items, method), "video", method)


def extract_fnirs_embeddings(
    channels: Sequence[Series],
    model1: PainViT,
    method: str = ADDITION,
    batch_size: int = 32,
) -> EmbeddingSet:
    """Render each channel as a waveform diagram, then embed and aggregate."""
    if len(channels) == 0:
        raise DataError("no usable fNIRS channels (all excluded?)")
    diagrams = [render(ch).pixels for ch in channels]
    embeddings = embed_images(diagrams, model1, batch_size)
    items = [row for row in embeddings]
    return EmbeddingSet(items, aggregate(items, method), "fnirs", method)


def fuse_modalities_addition(video: EmbeddingSet, fnirs: EmbeddingSet) -> np.ndarray:
    """Elementwise sum of the two aggregated representations."""
    if video.fused.shape != fnirs.fused.shape:
        raise DimensionError(
            f"fused vectors differ in shape: {video.fused.shape} vs {fnirs.fused.shape}"
        )
    return video.fused + fnirs.fused


def fuse_modalities_concatenation(video: EmbeddingSet, fnirs: EmbeddingSet) -> np.ndarray:
    return np.concatenate([video.fused, fnirs.fused])


def fuse_modalities_single_diagram(video: EmbeddingSet, fnirs: EmbeddingSet) -> WaveformImage:
    """Co-plot both aggregated vectors as strokes on one canvas."""
    a = series_from_vector(video.fused, "video-embedding")
    b = series_from_vector(fnirs.fused, "fnirs-embedding")
    return render_single_diagram(a, b)


def assess(sample, model2: PainViT) -> np.ndarray:
    """Class probabilities from the second model.

    A :class:`WaveformImage` or [C, H, W] array runs the full network; a 1-D
    vector of embedding width runs the classification head only (ablation
    mode).  Ties at the argmax resolve toward the lowest class index.
    """
    if isinstance(sample, WaveformImage):
        sample = sample.pixels
    if isinstance(sample, Tensor):
        sample = sample.data
    sample = np.asarray(sample, dtype=np.float64)
    with nx.no_grad():
        if sample.ndim == 1:
            if sample.shape[0] != model2.config.embedding_dim():
                raise DimensionError(
                    f"embedding of length {sample.shape[0]} does not match head "
                    f"width {model2.config.embedding_dim()}"
                )
            logits = nx.linear(Tensor(sample[None]), model2.head_w, model2.head_b)
        elif sample.ndim == 3:
            if not model2.bn_initialized():
                raise StateError("model normalization statistics are uninitialized")
            batch = Tensor(adapt_channels(sample, model2.config.in_channels)[None])
            _, logits = model2.forward(batch, training=False)
        else:
            raise DimensionError(f"cannot assess input of shape {sample.shape}")
        probabilities = nx.softmax(logits, axis=1)
    return probabilities.data[0]


# -- embedding dump -------------------------------------------------------------

FUSED_INDEX = -1


def write_embeddings(path, records) -> None:
    """Delimited dump: sample id, modality, item index, then the vector.

    Per-item rows use their position index; aggregated rows use index -1.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for sample_id, embedding_set in records:
            for index, item in enumerate(embedding_set.items):
                writer.writerow(
                    [sample_id, embedding_set.modality, index] + [repr(float(v)) for v in item]
                )
            writer.writerow(
                [sample_id, embedding_set.modality, FUSED_INDEX]
                + [repr(float(v)) for v in embedding_set.fused]
            )


def read_embeddings(path) -> list:
    """Inverse of :func:`write_embeddings`; returns (id, modality, index, vector)."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            sample_id, modality, index = row[0], row[1], int(row[2])
            vector = np.array([float(v) for v in row[3:]], dtype=np.float64)
            rows.append((sample_id, modality, index, vector))
    return rows
