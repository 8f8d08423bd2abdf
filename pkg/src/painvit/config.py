"""Run configuration: one JSON file drives training, evaluation, and sweeps."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigurationError
from .fusion import FUSION_METHODS
from .model import PROFILES
from .training import TrainConfig

MODALITIES = ("video", "fnirs-hbo", "fnirs-hbr", "fnirs-both", "fusion")

RUN_ROOT_ENV = "PAINVIT_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"


@dataclass
class RunConfig:
    seed: int = 0
    modality: str = "fusion"
    fusion: str = "single-diagram"
    profile: str = "smoke"
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.modality not in MODALITIES:
            raise ConfigurationError(
                f"modality must be one of {MODALITIES}, got {self.modality!r}"
            )
        if self.fusion not in FUSION_METHODS:
            raise ConfigurationError(
                f"fusion must be one of {FUSION_METHODS}, got {self.fusion!r}"
            )
        if self.profile not in PROFILES:
            raise ConfigurationError(
                f"profile must be one of {tuple(PROFILES)}, got {self.profile!r}"
            )
        self.train.validate()
        self.augment.validate()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "modality": self.modality,
            "fusion": self.fusion,
            "profile": self.profile,
            "train": self.train.to_dict(),
            "augment": self.augment.to_dict(),
        }

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        cfg = RunConfig(
            seed=int(data.get("seed", 0)),
            modality=data.get("modality", "fusion"),
            fusion=data.get("fusion", "single-diagram"),
            profile=data.get("profile", "smoke"),
            train=TrainConfig.from_dict(data.get("train", {})),
            augment=AugmentConfig.from_dict(data.get("augment", {})),
        )
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path) -> "RunConfig":
        return RunConfig.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha1(canonical.encode()).hexdigest()[:10]

    def run_dir(self, root=None) -> Path:
        """Sweep-safe output directory: config digest plus seed never collide."""
        base = Path(root or os.environ.get(RUN_ROOT_ENV, DEFAULT_RUN_ROOT))
        return base / f"{self.digest()}-seed{self.seed}"
