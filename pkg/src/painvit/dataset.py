"""On-disk dataset layout: synthetic generation and validated ingestion.

Layout, per root directory:

    samples/<id>/frames/frame_000.png .. frame_029.png   (224x224 RGB)
    samples/<id>/fnirs.csv    rows = time, 48 columns HbO_01..24, HbR_01..24
    labels.csv                id,label with label in {0, 1, 2}
    excluded_channels.txt     optional, one faulty channel name per line

Synthetic classes are separable by construction: frames carry a
class-specific grating orientation and the fNIRS channels a class-specific
frequency mix, each corrupted by noise scaled as 1/snr.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

FRAME_COUNT = 30
HBO_CHANNELS = [f"HbO_{i:02d}" for i in range(1, 25)]
HBR_CHANNELS = [f"HbR_{i:02d}" for i in range(1, 25)]
ALL_CHANNELS = HBO_CHANNELS + HBR_CHANNELS

# class-conditional signal parameters: grating orientation for frames,
# fundamental frequency for the fNIRS mixtures
FRAME_GRATINGS = [(4.0, 0.0), (0.0, 4.0), (3.0, 3.0)]
FNIRS_FREQS = [2.0, 5.0, 9.0]


@dataclass
class SyntheticSpec:
    per_class: int
    snr: float = 8.0
    classes: int = 3
    frames_per_sample: int = FRAME_COUNT
    fnirs_length: int = 240
    image_size: int = 224
    seed: int = 0

    def validate(self):
        if self.per_class < 1:
            raise DataError(f"per_class must be >= 1, got {self.per_class}")
        if not 1 <= self.classes <= 3:
            raise DataError(f"classes must be in [1, 3], got {self.classes}")
        if self.snr <= 0:
            raise DataError(f"snr must be positive, got {self.snr}")


def _frame_pixels(rng, label, frame_index, size, snr):
    fy, fx = FRAME_GRATINGS[label]
    coords = np.linspace(0.0, 2.0 * np.pi, size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    phase = rng.uniform(0.0, 2.0 * np.pi)
    drift = 0.25 * frame_index
    pattern = 0.5 + 0.35 * np.sin(fy * yy + fx * xx + phase + drift)
    channels = np.stack([pattern, 0.85 * pattern, 0.7 * pattern])
    channels += rng.normal(scale=0.5 / snr, size=channels.shape)
    return np.clip(channels, 0.0, 1.0)


def _fnirs_matrix(rng, label, length, snr):
    base = FNIRS_FREQS[label]
    t = np.linspace(0.0, 1.0, length)
    columns = []
    for j in range(24):  # oxygenated group
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.sin(2.0 * np.pi * base * t + phase)
        wave += 0.4 * np.sin(2.0 * np.pi * 2.0 * base * t + 0.3 * j)
        columns.append(wave + rng.normal(scale=1.0 / snr, size=length))
    for j in range(24):  # deoxygenated group mirrors with a lag
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = -0.6 * np.sin(2.0 * np.pi * base * t + phase + 0.5)
        wave += 0.3 * np.sin(2.0 * np.pi * 2.0 * base * t + 0.2 * j)
        columns.append(wave + rng.normal(scale=1.0 / snr, size=length))
    return np.stack(columns, axis=1)


def generate_dataset(spec: SyntheticSpec, out_dir) -> Path:
    """Write a complete dataset layout; identical specs produce identical bytes."""
    spec.validate()
    root = Path(out_dir)
    samples_dir = root / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    labels = []
    index = 0
    for label in range(spec.classes):
        for _ in range(spec.per_class):
            sample_id = f"sample_{index:04d}"
            index += 1
            labels.append((sample_id, label))
            frame_dir = samples_dir / sample_id / "frames"
            frame_dir.mkdir(parents=True, exist_ok=True)
            for f in range(spec.frames_per_sample):
                pixels = _frame_pixels(rng, label, f, spec.image_size, spec.snr)
                arr = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(
                    frame_dir / f"frame_{f:03d}.png", format="PNG", compress_level=1
                )
            matrix = _fnirs_matrix(rng, label, spec.fnirs_length, spec.snr)
            with open(samples_dir / sample_id / "fnirs.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(ALL_CHANNELS)
                for row in matrix:
                    writer.writerow([f"{v:.10f}" for v in row])
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        writer.writerows(labels)
    return root


@dataclass
class SampleRecord:
    sample_id: str
    label: int
    frame_dir: Path
    fnirs: np.ndarray  # [time, 48] in ALL_CHANNELS order
    frame_count: int


@dataclass
class Dataset:
    root: Path
    samples: list
    excluded_channels: set = field(default_factory=set)

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def class_counts(self) -> dict:
        counts: dict = {}
        for s in self.samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        return counts

    def channel_names(self, modality: str) -> list:
        if modality == "fnirs-hbo":
            names = HBO_CHANNELS
        elif modality == "fnirs-hbr":
            names = HBR_CHANNELS
        elif modality == "fnirs-both":
            names = ALL_CHANNELS
        else:
            raise DataError(f"unknown fNIRS modality {modality!r}")
        usable = [n for n in names if n not in self.excluded_channels]
        if not usable:
            raise DataError(f"all {modality} channels are excluded")
        return usable

    def channel_values(self, record: SampleRecord, modality: str) -> list:
        indices = [ALL_CHANNELS.index(n) for n in self.channel_names(modality)]
        return [record.fnirs[:, i] for i in indices]


def load_frames(record: SampleRecord) -> np.ndarray:
    """All frames for one sample as float64 [frames, 3, H, W] in [0, 1]."""
    frames = []
    for f in range(record.frame_count):
        path = record.frame_dir / f"frame_{f:03d}.png"
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        frames.append(arr.transpose(2, 0, 1))
    return np.stack(frames)


def _read_labels(root: Path) -> list:
    path = root / "labels.csv"
    if not path.exists():
        raise DataError(f"labels.csv not found under {root}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "label"]:
            raise DataError(f"labels.csv header must be id,label, got {header}")
        for line, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataError(f"labels.csv row {line} malformed: {row}")
            try:
                label = int(row[1])
            except ValueError as exc:
                raise DataError(f"labels.csv row {line}: label {row[1]!r} not an integer") from exc
            if label not in (0, 1, 2):
                raise DataError(f"labels.csv row {line}: label {label} outside {{0,1,2}}")
            rows.append((row[0], label))
    if not rows:
        raise DataError(f"labels.csv under {root} lists no samples")
    return rows


def _read_fnirs(path: Path, sample_id: str) -> np.ndarray:
    if not path.exists():
        raise DataError(f"sample {sample_id}: missing fnirs.csv")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ALL_CHANNELS:
            raise DataError(
                f"sample {sample_id}: fnirs.csv must have 48 columns "
                f"HbO_01..HbO_24,HbR_01..HbR_24"
            )
        rows = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(ALL_CHANNELS):
                raise DataError(
                    f"sample {sample_id}: fnirs.csv row {line} has {len(row)} values, "
                    f"expected {len(ALL_CHANNELS)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(
                    f"sample {sample_id}: fnirs.csv row {line} holds a non-numeric value"
                ) from exc
    if len(rows) < 2:
        raise DataError(f"sample {sample_id}: fnirs.csv needs at least 2 time steps")
    return np.asarray(rows, dtype=np.float64)


def ingest(root) -> Dataset:
    """Load and validate a dataset layout; frames stay on disk until needed."""
    root = Path(root)
    labels = _read_labels(root)
    excluded: set = set()
    exclusion_file = root / "excluded_channels.txt"
    if exclusion_file.exists():
        for line in exclusion_file.read_text().splitlines():
            name = line.strip()
            if not name:
                continue
            if name not in ALL_CHANNELS:
                raise DataError(f"excluded_channels.txt names unknown channel {name!r}")
            excluded.add(name)
    samples = []
    for sample_id, label in labels:
        sample_dir = root / "samples" / sample_id
        if not sample_dir.is_dir():
            raise DataError(f"sample {sample_id}: directory missing under {root}/samples")
        frame_dir = sample_dir / "frames"
        frames = sorted(frame_dir.glob("frame_*.png")) if frame_dir.is_dir() else []
        if len(frames) != FRAME_COUNT:
            raise DataError(
                f"sample {sample_id}: expected {FRAME_COUNT} frames, found {len(frames)}"
            )
        fnirs = _read_fnirs(sample_dir / "fnirs.csv", sample_id)
        samples.append(SampleRecord(sample_id, label, frame_dir, fnirs, len(frames)))
    return Dataset(root=root, samples=samples, excluded_channels=excluded)
