"""Seedable training-time image augmentation.

Everything operates on channel-first float arrays and is a pure function of
(image, config, rng state): a fixed seed reproduces byte-identical output.
The named policy gates (augmix / rand / trivial) are simplified stand-ins
sharing one geometric/photometric op set; only their application
probabilities differ, which is what the training sweeps vary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .numerics import Tensor

MASKOUT_SIDE_DIVISOR = 8  # square side = min(H, W) // 8, i.e. 28 px at 224

MAX_SHIFT_FRACTION = 0.05
MAX_ROTATION_DEG = 5.0
MAX_CONTRAST = 0.25
MAX_BRIGHTNESS = 0.15


@dataclass
class MaskOutConfig:
    probability: float = 0.0
    squares: int = 0
    side_divisor: int = MASKOUT_SIDE_DIVISOR

    def validate(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigurationError(f"maskout probability {self.probability} outside [0, 1]")
        if self.squares < 0:
            raise ConfigurationError(f"maskout square count must be >= 0, got {self.squares}")

    def as_notation(self) -> str:
        return f"{self.probability:g}|{self.squares}"

    @staticmethod
    def from_notation(text: str) -> "MaskOutConfig":
        p, _, k = text.partition("|")
        cfg = MaskOutConfig(float(p), int(k or 0))
        cfg.validate()
        return cfg


@dataclass
class NoiseConfig:
    probability: float = 0.0
    amplitude: float = 0.0

    def validate(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigurationError(f"noise probability {self.probability} outside [0, 1]")
        if self.amplitude < 0.0:
            raise ConfigurationError(f"noise amplitude must be >= 0, got {self.amplitude}")


@dataclass
class AugmentConfig:
    p_augmix: float = 0.0
    p_rand: float = 0.0
    p_trivial: float = 0.0
    maskout: MaskOutConfig = field(default_factory=MaskOutConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def validate(self):
        for name, p in (("augmix", self.p_augmix), ("rand", self.p_rand), ("trivial", self.p_trivial)):
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} probability {p} outside [0, 1]")
        self.maskout.validate()
        self.noise.validate()

    def to_dict(self) -> dict:
        return {
            "augmix": self.p_augmix,
            "rand": self.p_rand,
            "trivial": self.p_trivial,
            "maskout": self.maskout.as_notation(),
            "noise": {"probability": self.noise.probability, "amplitude": self.noise.amplitude},
        }

    @staticmethod
    def from_dict(data: dict) -> "AugmentConfig":
        cfg = AugmentConfig(
            p_augmix=float(data.get("augmix", 0.0)),
            p_rand=float(data.get("rand", 0.0)),
            p_trivial=float(data.get("trivial", 0.0)),
            maskout=MaskOutConfig.from_notation(str(data.get("maskout", "0|0"))),
            noise=NoiseConfig(**data.get("noise", {})),
        )
        cfg.validate()
        return cfg

    @staticmethod
    def uniform(probability: float, squares: int = 3, noise_amplitude: float = 0.05) -> "AugmentConfig":
        cfg = AugmentConfig(
            p_augmix=probability,
            p_rand=probability,
            p_trivial=probability,
            maskout=MaskOutConfig(probability, squares),
            noise=NoiseConfig(probability, noise_amplitude),
        )
        cfg.validate()
        return cfg


def _as_array(image) -> np.ndarray:
    if isinstance(image, Tensor):
        image = image.data
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3:
        raise ConfigurationError(f"augmentation expects [C, H, W] images, got {arr.shape}")
    return arr


def maskout(image, p: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """With probability ``p``, zero ``k`` random squares of side min(H,W)//8.

    Squares may overlap; positions are drawn so squares always lie inside
    the image (clipping is a no-op safeguard for degenerate sizes).
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"maskout probability {p} outside [0, 1]")
    if k < 0:
        raise ConfigurationError(f"maskout square count must be >= 0, got {k}")
    arr = _as_array(image)
    if rng.random() >= p or k == 0:
        return arr.copy()
    _, h, w = arr.shape
    side = min(h, w) // MASKOUT_SIDE_DIVISOR
    if side == 0:
        return arr.copy()
    out = arr.copy()
    for _ in range(k):
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        out[:, top : min(top + side, h), left : min(left + side, w)] = 0.0
    return out


def uniform_noise(image, p: float, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``p``, add i.i.d. Uniform(-amplitude, amplitude)."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"noise probability {p} outside [0, 1]")
    if amplitude < 0.0:
        raise ConfigurationError(f"noise amplitude must be >= 0, got {amplitude}")
    arr = _as_array(image)
    if rng.random() >= p or amplitude == 0.0:
        return arr.copy()
    return arr + rng.uniform(-amplitude, amplitude, size=arr.shape)


def _fill_value(arr: np.ndarray) -> np.ndarray:
    # corner pixel approximates the background; exact for waveform diagrams
    return arr[:, 0, 0][:, None, None]


def _shift(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    if dy == 0 and dx == 0:
        return arr.copy()
    out = np.broadcast_to(_fill_value(arr), arr.shape).copy()
    _, h, w = arr.shape
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[:, dst_y, dst_x] = arr[:, src_y, src_x]
    return out


def _rotate(arr: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0.0:
        return arr.copy()
    _, h, w = arr.shape
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: sample source coordinates with nearest neighbour
    rel_y, rel_x = ys - cy, xs - cx
    src_y = np.rint(cy + math.cos(theta) * rel_y - math.sin(theta) * rel_x).astype(int)
    src_x = np.rint(cx + math.sin(theta) * rel_y + math.cos(theta) * rel_x).astype(int)
    valid = (src_y >= 0) & (src_y < h) & (src_x >= 0) & (src_x < w)
    out = np.broadcast_to(_fill_value(arr), arr.shape).copy()
    out[:, valid] = arr[:, src_y[valid], src_x[valid]]
    return out


def _contrast(arr: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return arr.copy()
    mean = arr.mean(axis=(1, 2), keepdims=True)
    return mean + scale * (arr - mean)


def _brightness(arr: np.ndarray, delta: float) -> np.ndarray:
    return arr + delta


def _random_op(arr: np.ndarray, rng: np.random.Generator, magnitude: float = 1.0) -> np.ndarray:
    """One draw from the shared op set at a random strength."""
    _, h, w = arr.shape
    choice = int(rng.integers(0, 5))
    strength = rng.uniform(-1.0, 1.0) * magnitude
    if choice == 0:
        return _shift(arr, int(round(strength * MAX_SHIFT_FRACTION * h)), 0)
    if choice == 1:
        return _shift(arr, 0, int(round(strength * MAX_SHIFT_FRACTION * w)))
    if choice == 2:
        return _contrast(arr, 1.0 + strength * MAX_CONTRAST)
    if choice == 3:
        return _brightness(arr, strength * MAX_BRIGHTNESS)
    return _rotate(arr, strength * MAX_ROTATION_DEG)


def policy_stack(
    image,
    config: AugmentConfig,
    rng: np.random.Generator,
    magnitude: float = 1.0,
) -> np.ndarray:
    """Apply the full stack in fixed order: augmix, rand, trivial, maskout, noise.

    Each named policy is gated by its probability and applies one op from
    the shared set.  ``magnitude`` scales all op strengths; zero magnitude
    makes the geometric/photometric stand-ins exact identities.
    """
    config.validate()
    arr = _as_array(image)
    for p in (config.p_augmix, config.p_rand, config.p_trivial):
        if rng.random() < p:
            arr = _random_op(arr, rng, magnitude)
    arr = maskout(arr, config.maskout.probability, config.maskout.squares, rng)
    arr = uniform_noise(arr, config.noise.probability, config.noise.amplitude, rng)
    return arr
