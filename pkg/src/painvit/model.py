"""Hierarchical vision transformer with token mixing and cascaded attention.

The network stacks three stages of units, each unit being a token mixer, a
cascaded multi-head attention block, and a second token mixer.  Overlapping
patch embedding maps a 224x224 image to a 14x14 token grid; stage
transitions halve the grid (ceiling division) while widening channels.
Global mean pooling over the final tokens yields the embedding consumed by
the classification head and by downstream fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DimensionError
from .numerics import RunningStats, Tensor

PATCH_DOWNSAMPLE = 16  # four overlapping stride-2 convolutions
MERGE_EXPANSION = 4
FFN_EXPANSION = 2


@dataclass(frozen=True)
class PainViTConfig:
    image_size: int = 224
    in_channels: int = 3
    patch_widths: tuple = (24, 48, 96, 192)
    dims: tuple = (192, 288, 500)
    depths: tuple = (1, 3, 4)
    heads: tuple = (3, 3, 4)
    num_classes: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    attention_pre_norm: bool = True
    drop_rate: float = 0.0

    def __post_init__(self):
        if len(self.dims) != 3 or len(self.depths) != 3 or len(self.heads) != 3:
            raise ConfigurationError("exactly three stages are required")
        if self.image_size % PATCH_DOWNSAMPLE != 0:
            raise ConfigurationError(
                f"image_size must be divisible by {PATCH_DOWNSAMPLE}, got {self.image_size}"
            )
        for d, h in zip(self.dims, self.heads):
            if d % h != 0:
                raise ConfigurationError(f"dim {d} not divisible by heads {h}")
        if self.patch_widths[-1] != self.dims[0]:
            raise ConfigurationError(
                "last patch-embedding width must equal the first stage dim"
            )
        if self.in_channels not in (1, 3):
            raise ConfigurationError(f"in_channels must be 1 or 3, got {self.in_channels}")

    @property
    def token_grids(self) -> list:
        g = self.image_size // PATCH_DOWNSAMPLE
        grids = [(g, g)]
        for _ in range(2):
            g = -(-g // 2)
            grids.append((g, g))
        return grids

    def embedding_dim(self) -> int:
        return self.dims[-1]


# Ready-made configurations.  "full" is the production geometry; the reduced
# ones keep every module type while staying cheap enough for CPU training
# and finite-difference sweeps.
PROFILES = {
    "full": PainViTConfig(),
    "small": PainViTConfig(
        patch_widths=(4, 8, 16, 32), dims=(32, 48, 64), depths=(1, 1, 1), heads=(2, 2, 2)
    ),
    "smoke": PainViTConfig(
        patch_widths=(3, 6, 12, 24), dims=(24, 36, 48), depths=(1, 1, 1), heads=(2, 2, 2)
    ),
    "tiny": PainViTConfig(
        image_size=96,
        patch_widths=(2, 3, 4, 6),
        dims=(6, 9, 8),
        depths=(1, 1, 1),
        heads=(3, 3, 4),
    ),
}


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _glorot_normal(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Parameter and statistics registry via attribute introspection."""

    @staticmethod
    def _walk(value, path: str) -> Iterator:
        if isinstance(value, (Tensor, RunningStats)):
            yield path, value
        elif isinstance(value, Module):
            for name, child in vars(value).items():
                yield from Module._walk(child, f"{path}.{name}" if path else name)
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                yield from Module._walk(item, f"{path}.{i}")

    def named_parameters(self, prefix: str = "") -> Iterator:
        for path, value in Module._walk(self, prefix):
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value

    def named_stats(self, prefix: str = "") -> Iterator:
        for path, value in Module._walk(self, prefix):
            if isinstance(value, RunningStats):
                yield path, value

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float, momentum: float, axis: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = _zeros(channels)
        self.stats = RunningStats(channels, momentum)
        self.eps = eps
        self.axis = axis

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return nx.batch_norm(
            x, self.gamma, self.beta, self.stats, training, eps=self.eps, axis=self.axis
        )


class ConvBN(Module):
    """3x3 convolution (no bias) followed by channel batch norm."""

    def __init__(self, cfg: PainViTConfig, rng, cin: int, cout: int, stride: int):
        self.kernel = _he_normal(rng, (cout, cin, 3, 3), fan_in=cin * 9)
        self.bn = BatchNorm(cout, cfg.bn_eps, cfg.bn_momentum, axis=1)
        self.stride = stride

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.bn(nx.conv2d(x, self.kernel, None, self.stride, 1), training)


class PatchEmbed(Module):
    """Four overlapping stride-2 convolutions: 16x spatial reduction."""

    def __init__(self, cfg: PainViTConfig, rng):
        widths = (cfg.in_channels,) + tuple(cfg.patch_widths)
        self.convs = [
            ConvBN(cfg, rng, widths[i], widths[i + 1], stride=2) for i in range(4)
        ]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x, training)
            if i < len(self.convs) - 1:
                x = nx.relu(x)
        return x


def tokens_to_grid(x: Tensor, grid) -> Tensor:
    b, n, d = x.shape
    r, c = grid
    if n != r * c:
        raise DimensionError(f"{n} tokens do not form a {r}x{c} grid")
    return nx.reshape(nx.transpose(x, (0, 2, 1)), (b, d, r, c))


def grid_to_tokens(x: Tensor) -> Tensor:
    b, d, r, c = x.shape
    return nx.transpose(nx.reshape(x, (b, d, r * c)), (0, 2, 1))


class FeedForward(Module):
    """Two-layer channel MLP with fixed 2x expansion."""

    def __init__(self, cfg: PainViTConfig, rng, dim: int):
        hidden = FFN_EXPANSION * dim
        self.w1 = _he_normal(rng, (dim, hidden), fan_in=dim)
        self.b1 = _zeros(hidden)
        self.w2 = _glorot_normal(rng, (hidden, dim), fan_in=hidden, fan_out=dim)
        self.b2 = _zeros(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(nx.relu(nx.linear(x, self.w1, self.b1)), self.w2, self.b2)


class TokenMixer(Module):
    """Local mixing: depthwise conv + batch norm, then a channel FFN.

    Each sub-step carries its own residual connection, so zeroed weights
    leave the input untouched.
    """

    def __init__(self, cfg: PainViTConfig, rng, dim: int):
        self.dw_kernel = _he_normal(rng, (dim, 3, 3), fan_in=9)
        self.dw_bias = _zeros(dim)
        self.bn = BatchNorm(dim, cfg.bn_eps, cfg.bn_momentum, axis=1)
        self.ffn = FeedForward(cfg, rng, dim)

    def __call__(self, x: Tensor, grid, training: bool) -> Tensor:
        mixed = nx.depthwise_conv2d(tokens_to_grid(x, grid), self.dw_kernel, self.dw_bias, 1, 1)
        x = x + grid_to_tokens(self.bn(mixed, training))
        return x + self.ffn(x)


class AttentionHead(Module):
    def __init__(self, cfg: PainViTConfig, rng, seg: int):
        self.wq = _glorot_normal(rng, (seg, seg), fan_in=seg, fan_out=seg)
        self.wk = _glorot_normal(rng, (seg, seg), fan_in=seg, fan_out=seg)
        self.wv = _glorot_normal(rng, (seg, seg), fan_in=seg, fan_out=seg)
        self.q_kernel = _he_normal(rng, (seg, 3, 3), fan_in=9)
        self.q_bias = _zeros(seg)


class CascadedAttention(Module):
    """Multi-head attention over channel segments with head chaining.

    The input is split into one segment per head; from the second head on,
    the previous head's output is added to the segment before projection.
    Queries pass through a 3x3 depthwise convolution over the token grid.
    Head outputs are concatenated and linearly reassembled to the full width.
    """

    def __init__(self, cfg: PainViTConfig, rng, dim: int, heads: int):
        if dim % heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by {heads} heads")
        seg = dim // heads
        self.pre_norm = (
            BatchNorm(dim, cfg.bn_eps, cfg.bn_momentum, axis=2) if cfg.attention_pre_norm else None
        )
        self.heads = [AttentionHead(cfg, rng, seg) for _ in range(heads)]
        self.proj = _glorot_normal(rng, (dim, dim), fan_in=dim, fan_out=dim)
        self.seg = seg
        self.scale = 1.0 / math.sqrt(seg)

    def __call__(
        self,
        x: Tensor,
        grid,
        training: bool,
        residual: bool = True,
        capture: Optional[list] = None,
    ) -> Tensor:
        inputs = self.pre_norm(x, training) if self.pre_norm is not None else x
        outputs = []
        previous = None
        for j, head in enumerate(self.heads):
            segment = inputs[:, :, j * self.seg : (j + 1) * self.seg]
            if previous is not None:
                segment = segment + previous
            q = nx.matmul(segment, head.wq)
            k = nx.matmul(segment, head.wk)
            v = nx.matmul(segment, head.wv)
            q = grid_to_tokens(
                nx.depthwise_conv2d(tokens_to_grid(q, grid), head.q_kernel, head.q_bias, 1, 1)
            )
            logits = nx.matmul(q, nx.transpose(k, (0, 2, 1))) * self.scale
            attn = nx.softmax(logits, axis=-1)
            if capture is not None:
                capture.append(attn.data.copy())
            previous = nx.matmul(attn, v)
            outputs.append(previous)
        projected = nx.matmul(nx.concat(outputs, axis=2), self.proj)
        return x + projected if residual else projected


class Unit(Module):
    """Token mixer, cascaded attention, token mixer."""

    def __init__(self, cfg: PainViTConfig, rng, dim: int, heads: int):
        self.mixer_in = TokenMixer(cfg, rng, dim)
        self.attention = CascadedAttention(cfg, rng, dim, heads)
        self.mixer_out = TokenMixer(cfg, rng, dim)

    def __call__(self, x: Tensor, grid, training: bool, capture=None) -> Tensor:
        x = self.mixer_in(x, grid, training)
        x = self.attention(x, grid, training, capture=capture)
        return self.mixer_out(x, grid, training)


class PatchMerge(Module):
    """Stage transition: halve the token grid, widen the channels.

    A token mixer on either side sandwiches the merge itself: a 4x linear
    channel expansion, a stride-2 depthwise convolution over the grid, and a
    linear projection to the next stage width.
    """

    def __init__(self, cfg: PainViTConfig, rng, dim_in: int, dim_out: int):
        wide = MERGE_EXPANSION * dim_in
        self.pre = TokenMixer(cfg, rng, dim_in)
        self.expand = _glorot_normal(rng, (dim_in, wide), fan_in=dim_in, fan_out=wide)
        self.expand_bn = BatchNorm(wide, cfg.bn_eps, cfg.bn_momentum, axis=2)
        self.dw_kernel = _he_normal(rng, (wide, 3, 3), fan_in=9)
        self.dw_bn = BatchNorm(wide, cfg.bn_eps, cfg.bn_momentum, axis=1)
        self.project = _glorot_normal(rng, (wide, dim_out), fan_in=wide, fan_out=dim_out)
        self.project_bn = BatchNorm(dim_out, cfg.bn_eps, cfg.bn_momentum, axis=2)
        self.post = TokenMixer(cfg, rng, dim_out)

    def __call__(self, x: Tensor, grid, training: bool):
        x = self.pre(x, grid, training)
        x = nx.relu(self.expand_bn(nx.linear(x, self.expand), training))
        strided = nx.depthwise_conv2d(
            tokens_to_grid(x, grid), self.dw_kernel, None, stride=2, padding=1
        )
        new_grid = strided.shape[2], strided.shape[3]
        x = grid_to_tokens(self.dw_bn(strided, training))
        x = self.project_bn(nx.linear(x, self.project), training)
        return self.post(x, new_grid, training), new_grid


class PainViT(Module):
    """Full network: patch embedding, three stages, pooled embedding, head."""

    def __init__(self, config: PainViTConfig = None, seed: int = 0):
        cfg = config or PainViTConfig()
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        self.stages = [
            [Unit(cfg, rng, cfg.dims[i], cfg.heads[i]) for _ in range(cfg.depths[i])]
            for i in range(3)
        ]
        self.merges = [
            PatchMerge(cfg, rng, cfg.dims[0], cfg.dims[1]),
            PatchMerge(cfg, rng, cfg.dims[1], cfg.dims[2]),
        ]
        self.head_w = _glorot_normal(
            rng, (cfg.dims[-1], cfg.num_classes), fan_in=cfg.dims[-1], fan_out=cfg.num_classes
        )
        self.head_b = _zeros(cfg.num_classes)

    def forward(
        self,
        images: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        attention_sink: Optional[dict] = None,
    ):
        """Return (embedding [B, D], logits [B, num_classes])."""
        images = nx.as_tensor(images)
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise DimensionError(
                f"expected input [B, {expected[0]}, {expected[1]}, {expected[2]}], "
                f"got {images.shape}"
            )
        x = grid_to_tokens(self.patch_embed(images, training))
        grid = cfg.token_grids[0]
        for stage_index, units in enumerate(self.stages):
            for unit_index, unit in enumerate(units):
                capture = [] if attention_sink is not None else None
                x = unit(x, grid, training, capture=capture)
                if attention_sink is not None:
                    attention_sink[(stage_index, unit_index)] = capture
            if stage_index < 2:
                x, grid = self.merges[stage_index](x, grid, training)
        embedding = nx.tensor_mean(x, axis=1)
        pooled = embedding
        if training and cfg.drop_rate > 0.0:
            pooled = nx.dropout(pooled, cfg.drop_rate, rng, training)
        logits = nx.linear(pooled, self.head_w, self.head_b)
        return embedding, logits

    __call__ = forward

    def embed(self, images, training: bool = False) -> np.ndarray:
        """Pre-head embeddings as a plain array (no gradient tracking)."""
        return self.forward(images, training=training)[0].data

    def bn_initialized(self) -> bool:
        return all(stats.initialized for _, stats in self.named_stats())


def attention_weights(model: PainViT, image, stage: int, depth: int) -> list:
    """Post-softmax attention matrices for one unit, one per head.

    ``image`` is a single [C, H, W] input; each returned matrix is [N, N]
    with rows summing to one.
    """
    if not 0 <= stage < len(model.stages):
        raise ConfigurationError(f"stage index {stage} out of range")
    if not 0 <= depth < len(model.stages[stage]):
        raise ConfigurationError(f"depth index {depth} out of range for stage {stage}")
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    sink: dict = {}
    model.forward(Tensor(arr), training=False, attention_sink=sink)
    return [head_attn[0] for head_attn in sink[(stage, depth)]]


# -- accounting --------------------------------------------------------------------


def count_params(model: PainViT) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    return sum(p.data.size for _, p in model.named_parameters())


def _mixer_macs(dim: int, tokens: int) -> int:
    dw = 9 * dim * tokens
    bn = dim * tokens
    ffn = 2 * FFN_EXPANSION * dim * dim * tokens  # d->2d and 2d->d linear layers
    return dw + bn + ffn


def _attention_macs(dim: int, heads: int, tokens: int, pre_norm: bool) -> int:
    seg = dim // heads
    total = dim * tokens if pre_norm else 0
    per_head = 3 * tokens * seg * seg + 9 * seg * tokens + 2 * tokens * tokens * seg
    total += heads * per_head
    total += tokens * dim * dim  # output projection
    return total


def count_macs(model_or_config) -> dict:
    """Analytic multiply-accumulate count for one forward pass.

    Returns a per-component breakdown plus ``total``.  Convolutions, linear
    maps, attention matrix products, and batch-norm scale/shift are counted;
    activations, residuals, softmax, and pooling are not.
    """
    cfg = model_or_config.config if isinstance(model_or_config, PainViT) else model_or_config
    breakdown = {}
    widths = (cfg.in_channels,) + tuple(cfg.patch_widths)
    side = cfg.image_size
    patch = 0
    for i in range(4):
        side //= 2
        patch += 9 * widths[i] * widths[i + 1] * side * side  # conv
        patch += widths[i + 1] * side * side  # bn
    breakdown["patch_embed"] = patch

    grids = cfg.token_grids
    for i in range(3):
        tokens = grids[i][0] * grids[i][1]
        unit = (
            2 * _mixer_macs(cfg.dims[i], tokens)
            + _attention_macs(cfg.dims[i], cfg.heads[i], tokens, cfg.attention_pre_norm)
        )
        breakdown[f"stage{i + 1}"] = cfg.depths[i] * unit

    for i in range(2):
        din, dout = cfg.dims[i], cfg.dims[i + 1]
        wide = MERGE_EXPANSION * din
        n_in = grids[i][0] * grids[i][1]
        n_out = grids[i + 1][0] * grids[i + 1][1]
        merge = _mixer_macs(din, n_in)
        merge += n_in * din * wide + wide * n_in  # expand + bn
        merge += 9 * wide * n_out + wide * n_out  # strided depthwise + bn
        merge += n_out * wide * dout + dout * n_out  # project + bn
        merge += _mixer_macs(dout, n_out)
        breakdown[f"merge{i + 1}"] = merge

    breakdown["head"] = cfg.dims[-1] * cfg.num_classes
    breakdown["total"] = sum(breakdown.values())
    return breakdown


def count_flops(model_or_config) -> int:
    """Forward cost under the reporting convention used for this family of
    models, where one multiply-accumulate counts as one FLOP."""
    return count_macs(model_or_config)["total"]


def _mixer_params(dim: int) -> int:
    # depthwise kernel + bias, norm scale/shift, two FFN layers with biases
    return (9 * dim + dim) + 2 * dim + (2 * dim * dim + 2 * dim) + (2 * dim * dim + dim)


def _attention_params(dim: int, heads: int, pre_norm: bool) -> int:
    seg = dim // heads
    total = 2 * dim if pre_norm else 0
    total += heads * (3 * seg * seg + 9 * seg + seg)  # projections + query conv
    total += dim * dim  # output reassembly
    return total


def count_params_analytic(config: PainViTConfig) -> dict:
    """Trainable-parameter breakdown straight from the configuration.

    Matches :func:`count_params` on a constructed model exactly (asserted in
    the test suite) while costing nothing to evaluate.
    """
    breakdown = {}
    widths = (config.in_channels,) + tuple(config.patch_widths)
    breakdown["patch_embed"] = sum(
        9 * widths[i] * widths[i + 1] + 2 * widths[i + 1] for i in range(4)
    )
    for i in range(3):
        unit = 2 * _mixer_params(config.dims[i]) + _attention_params(
            config.dims[i], config.heads[i], config.attention_pre_norm
        )
        breakdown[f"stage{i + 1}"] = config.depths[i] * unit
    for i in range(2):
        din, dout = config.dims[i], config.dims[i + 1]
        wide = MERGE_EXPANSION * din
        merge = _mixer_params(din) + _mixer_params(dout)
        merge += din * wide + 2 * wide  # expansion + norm
        merge += 9 * wide + 2 * wide  # strided depthwise + norm
        merge += wide * dout + 2 * dout  # projection + norm
        breakdown[f"merge{i + 1}"] = merge
    breakdown["head"] = config.dims[-1] * config.num_classes + config.num_classes
    breakdown["total"] = sum(breakdown.values())
    return breakdown


def param_breakdown(model: PainViT) -> dict:
    """Trainable-parameter totals per architectural component."""
    groups = {}
    for name, p in model.named_parameters():
        if name.startswith("stages."):
            key = f"stage{int(name.split('.')[1]) + 1}"
        elif name.startswith("merges."):
            key = f"merge{int(name.split('.')[1]) + 1}"
        elif name.startswith("patch_embed"):
            key = "patch_embed"
        else:
            key = "head"
        groups[key] = groups.get(key, 0) + p.data.size
    groups["total"] = sum(groups.values())
    return groups
