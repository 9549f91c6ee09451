"""Hierarchical hybrid Mamba/attention feature extractor.

Stage ``l`` runs at width ``base_dim * 2**l`` on a feature map of
``(H/4) / 2**l`` per side. Within a stage, the first ``depth // 2`` blocks
mix tokens with the selective-scan mixer and the rest with windowed
self-attention; every block is pre-norm residual with layer scale.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Mlp, Module, parameter
from .scan import selective_scan
from .tensor import Tensor, concat, split, swapaxes

PromptHook = Callable[[int, Tensor], Tensor]


@dataclass
class ModelConfig:
    in_bands: int = 30
    num_classes: int = 9
    base_dim: int = 80
    depths: list[int] = field(default_factory=lambda: [1, 3, 8, 4])
    window_sizes: list[int] = field(default_factory=lambda: [8, 8, 14, 7])
    num_heads: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    mlp_ratio: float = 4.0
    d_state: int = 16
    d_conv: int = 3
    expand: float = 1.0
    layer_scale_init: float = 1.0
    drop_path_max: float = 0.1
    qk_norm: bool = True

    def __post_init__(self) -> None:
        self.depths = [int(v) for v in self.depths]
        self.window_sizes = [int(v) for v in self.window_sizes]
        self.num_heads = [int(v) for v in self.num_heads]
        self.validate()

    @classmethod
    def tiny(cls, in_bands: int = 30, num_classes: int = 6, **overrides) -> "ModelConfig":
        """Desk-scale configuration sized for 32x32 padded inputs."""
        base = dict(
            in_bands=in_bands,
            num_classes=num_classes,
            base_dim=16,
            depths=[1, 1, 2, 1],
            window_sizes=[8, 4, 2, 1],
            num_heads=[2, 2, 4, 4],
            mlp_ratio=2.0,
            drop_path_max=0.0,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"model: unknown keys {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def num_levels(self) -> int:
        return len(self.depths)

    def dim(self, level: int) -> int:
        return self.base_dim * 2**level

    def validate(self) -> None:
        n = len(self.depths)
        if n < 1 or len(self.window_sizes) != n or len(self.num_heads) != n:
            raise ConfigError("depths, window_sizes and num_heads must have the same non-zero length")
        if self.in_bands < 1 or self.num_classes < 1 or self.base_dim < 1:
            raise ConfigError("in_bands, num_classes and base_dim must be positive")
        if min(self.depths) < 1 or min(self.window_sizes) < 1 or min(self.num_heads) < 1:
            raise ConfigError("depths, window_sizes and num_heads must all be >= 1")
        if self.d_state < 1 or self.d_conv < 1 or self.expand <= 0:
            raise ConfigError("d_state and d_conv must be >= 1 and expand > 0")
        if not 0.0 <= self.drop_path_max < 1.0:
            raise ConfigError(f"drop_path_max must lie in [0, 1), got {self.drop_path_max}")
        for level in range(n):
            d = self.dim(level)
            if d % self.num_heads[level]:
                raise ConfigError(f"level {level}: dim {d} not divisible by {self.num_heads[level]} heads")
            d_in = self.expand * d
            if d_in != int(d_in) or int(d_in) % 2:
                raise ConfigError(f"level {level}: mixer inner dim expand*d = {d_in} must be an even integer")

    def input_multiple(self) -> int:
        """Spatial multiple the input is padded to so every stage halves and windows tile exactly."""
        multiple = 4 * 2 ** (self.num_levels - 1)
        for level, w in enumerate(self.window_sizes):
            multiple = math.lcm(multiple, 4 * 2**level * w)
        return multiple


class MixerKind(enum.Enum):
    MAMBA = "mamba"
    ATTENTION = "attention"


def mixer_kind(level_depth: int, block_index: int) -> MixerKind:
    if not 0 <= block_index < level_depth:
        raise ConfigError(f"block index {block_index} outside [0, {level_depth})")
    return MixerKind.MAMBA if block_index < level_depth // 2 else MixerKind.ATTENTION


# ---------------------------------------------------------------------------
# windows


def window_partition(x: Tensor, w: int) -> Tensor:
    """``[B, C, H, W]`` -> ``[B * (H/w) * (W/w), w*w, C]``, windows in row-major order."""
    b, c, h, wd = x.shape
    if h % w or wd % w:
        raise DimensionError(f"internal invariant violated: feature map {h}x{wd} not divisible by window {w}")
    t = x.transpose(0, 2, 3, 1).reshape(b, h // w, w, wd // w, w, c)
    return t.transpose(0, 1, 3, 2, 4, 5).reshape(b * (h // w) * (wd // w), w * w, c)


def window_reverse(s: Tensor, w: int, batch: int, h: int, wd: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    c = s.shape[-1]
    if h % w or wd % w or s.shape[0] != batch * (h // w) * (wd // w) or s.shape[1] != w * w:
        raise DimensionError(f"internal invariant violated: cannot fold {s.shape} into {batch}x{c}x{h}x{wd} (w={w})")
    t = s.reshape(batch, h // w, wd // w, w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(batch, h, wd, c).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# front-end and downsampling


def pad_to_multiple(x: Tensor, multiple: int) -> tuple[Tensor, tuple[int, int, int, int]]:
    """Reflect-pad H and W up to ``multiple``; returns (padded, (top, bottom, left, right))."""
    h, w = x.shape[-2:]
    ph = -h % multiple
    pw = -w % multiple
    pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    return F.pad_reflect(x, *pads), pads


class PatchEmbed(Module):
    """Two stride-2 3x3 convolutions, each followed by batchnorm and ReLU."""

    def __init__(self, in_bands: int, dim: int, rng: np.random.Generator):
        self.in_bands = in_bands
        self.conv1 = Conv2d(in_bands, dim, 3, rng, stride=2, padding=1, bias=False)
        self.bn1 = BatchNorm2d(dim)
        self.conv2 = Conv2d(dim, dim, 3, rng, stride=2, padding=1, bias=False)
        self.bn2 = BatchNorm2d(dim)

    def __call__(self, image: Tensor, training: bool) -> Tensor:
        if image.ndim != 4 or image.shape[1] != self.in_bands:
            raise ConfigError(f"patch_embed: expected [B, {self.in_bands}, H, W] input, got {image.shape}")
        if min(image.shape[-2:]) < 4:
            raise DimensionError(f"patch_embed: spatial size must be >= 4, got {image.shape[-2:]}")
        x, _ = pad_to_multiple(image, 4)
        x = F.relu(self.bn1(self.conv1(x), training))
        return F.relu(self.bn2(self.conv2(x), training))


class Downsample(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.conv = Conv2d(dim, 2 * dim, 3, rng, stride=2, padding=1, bias=False)
        self.bn = BatchNorm2d(2 * dim)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise DimensionError(f"internal invariant violated: cannot downsample odd map {h}x{w}")
        return self.bn(self.conv(x), training)


# ---------------------------------------------------------------------------
# mixers


class MambaMixer(Module):
    """Selective-scan token mixer over a ``[M, L, d]`` sequence batch.

    The input projection is split into a scan branch and a gate branch; both
    pass through a causal depthwise conv and SiLU. The scan branch produces
    its own step sizes and input/output state projections. Outputs of the
    two branches are concatenated and projected back to ``d``.
    """

    def __init__(self, dim: int, d_state: int, d_conv: int, expand: float, rng: np.random.Generator):
        d_inner = expand * dim
        if d_inner != int(d_inner) or int(d_inner) % 2:
            raise ConfigError(f"mamba mixer: inner dim {d_inner} must be an even integer")
        d_inner = int(d_inner)
        half = d_inner // 2
        self.dim, self.d_inner, self.half, self.d_state = dim, d_inner, half, d_state
        self.dt_rank = math.ceil(dim / 16)
        conv_std = np.sqrt(2.0 / d_conv)
        self.in_proj = Linear(dim, d_inner, rng, bias=False)
        self.conv_x_weight = parameter(rng.normal(0.0, conv_std, size=(half, d_conv)))
        self.conv_x_bias = parameter(np.zeros(half))
        self.conv_z_weight = parameter(rng.normal(0.0, conv_std, size=(half, d_conv)))
        self.conv_z_bias = parameter(np.zeros(half))
        self.x_proj = Linear(half, self.dt_rank + 2 * d_state, rng, bias=False)
        self.dt_proj = Linear(self.dt_rank, half, rng, bias=True)
        self.A_log = parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (half, 1))))
        self.D = parameter(np.ones(half))
        self.out_proj = Linear(d_inner, dim, rng, bias=False)

    def __call__(self, s: Tensor) -> Tensor:
        z = self.in_proj(s)
        z1, z2 = split(z, 2, axis=-1)
        x = F.silu(F.depthwise_conv1d(swapaxes(z1, 1, 2), self.conv_x_weight, self.conv_x_bias))
        gate = F.silu(F.depthwise_conv1d(swapaxes(z2, 1, 2), self.conv_z_weight, self.conv_z_bias))
        x_dbl = self.x_proj(swapaxes(x, 1, 2))
        r, n = self.dt_rank, self.d_state
        dt = x_dbl[..., :r]
        b_ssm = swapaxes(x_dbl[..., r : r + n], 1, 2)
        c_ssm = swapaxes(x_dbl[..., r + n :], 1, 2)
        delta = swapaxes(F.softplus(self.dt_proj(dt)), 1, 2)
        a = -(self.A_log.exp())
        y = selective_scan(x, delta, a, b_ssm, c_ssm, self.D)
        return self.out_proj(swapaxes(concat([y, gate], axis=1), 1, 2))


class WindowAttention(Module):
    """Multi-head self-attention within each window sequence; no positional terms."""

    def __init__(self, dim: int, num_heads: int, qk_norm: bool, rng: np.random.Generator):
        if dim % num_heads:
            raise ConfigError(f"attention: dim {dim} not divisible by {num_heads} heads")
        self.dim, self.num_heads = dim, num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.q_norm = LayerNorm(self.head_dim) if qk_norm else None
        self.k_norm = LayerNorm(self.head_dim) if qk_norm else None
        self.proj = Linear(dim, dim, rng)

    def attention_weights(self, s: Tensor) -> tuple[Tensor, Tensor]:
        m, length, _ = s.shape
        qkv = self.qkv(s).reshape(m, length, 3, self.num_heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if self.q_norm is not None:
            q, k = self.q_norm(q), self.k_norm(k)
        weights = F.softmax((q @ swapaxes(k, -1, -2)) * self.scale, axis=-1)
        return weights, v

    def __call__(self, s: Tensor) -> Tensor:
        m, length, _ = s.shape
        weights, v = self.attention_weights(s)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(m, length, self.dim)
        return self.proj(out)


# ---------------------------------------------------------------------------
# blocks and stages


class HybridBlock(Module):
    def __init__(
        self,
        dim: int,
        kind: MixerKind,
        config: ModelConfig,
        num_heads: int,
        drop_path: float,
        rng: np.random.Generator,
    ):
        self.kind = kind
        self.norm1 = LayerNorm(dim)
        if kind is MixerKind.MAMBA:
            self.mixer = MambaMixer(dim, config.d_state, config.d_conv, config.expand, rng)
        else:
            self.mixer = WindowAttention(dim, num_heads, config.qk_norm, rng)
        self.gamma1 = parameter(np.full(dim, config.layer_scale_init))
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(round(config.mlp_ratio * dim)), rng)
        self.gamma2 = parameter(np.full(dim, config.layer_scale_init))
        self.drop_path = drop_path

    def __call__(self, u: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        u = u + self.gamma1 * F.drop_path(self.mixer(self.norm1(u)), self.drop_path, training, rng)
        return u + self.gamma2 * F.drop_path(self.mlp(self.norm2(u)), self.drop_path, training, rng)


class Stage(Module):
    def __init__(self, level: int, config: ModelConfig, drop_paths: Sequence[float], rng: np.random.Generator):
        dim = config.dim(level)
        depth = config.depths[level]
        self.level = level
        self.window = config.window_sizes[level]
        self.blocks = [
            HybridBlock(dim, mixer_kind(depth, i), config, config.num_heads[level], drop_paths[i], rng)
            for i in range(depth)
        ]

    def __call__(self, x: Tensor, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
        b, _, h, w = x.shape
        s = window_partition(x, self.window)
        for block in self.blocks:
            s = block(s, training, rng)
        return window_reverse(s, self.window, b, h, w)


def valid_mask(pads: tuple[int, int, int, int], padded_hw: tuple[int, int], final_hw: tuple[int, int]) -> np.ndarray:
    """Final-level cells whose receptive block overlaps the unpadded input."""
    top, bottom, left, right = pads
    ph, pw = padded_hw
    fh, fw = final_hw
    sh, sw = ph // fh, pw // fw
    rows = np.array([(i * sh < ph - bottom) and ((i + 1) * sh > top) for i in range(fh)])
    cols = np.array([(j * sw < pw - right) and ((j + 1) * sw > left) for j in range(fw)])
    return np.outer(rows, cols).astype(np.float64)


class Backbone(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.patch_embed = PatchEmbed(config.in_bands, config.base_dim, rng)
        total = sum(config.depths)
        rates = np.linspace(0.0, config.drop_path_max, total) if total > 1 else np.zeros(total)
        self.stages = []
        self.downsamples = []
        offset = 0
        for level in range(config.num_levels):
            depth = config.depths[level]
            self.stages.append(Stage(level, config, [float(r) for r in rates[offset : offset + depth]], rng))
            offset += depth
            if level < config.num_levels - 1:
                self.downsamples.append(Downsample(config.dim(level), rng))

    def __call__(
        self,
        image: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        prompt_hook: Optional[PromptHook] = None,
    ) -> tuple[Tensor, np.ndarray]:
        """Returns final-level features and the pooling mask of non-padding cells."""
        padded, pads = pad_to_multiple(image, self.config.input_multiple())
        x = self.patch_embed(padded, training)
        for level, stage in enumerate(self.stages):
            x = stage(x, training, rng)
            if prompt_hook is not None:
                x = prompt_hook(level, x)
            if level < len(self.downsamples):
                x = self.downsamples[level](x, training)
        return x, valid_mask(pads, padded.shape[-2:], x.shape[-2:])
