"""Visual-textual prompting: text-embedding bank, TCSP cross-attention and feature fusion.

A frozen bank of per-task text embeddings supplies queries; a small learnable
spatial tensor (the visual prompt) supplies keys and values. The attended
prompt is refined, resized to the feature map and fused with it through one
transformer block and a 1x1 projection.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError, FormatError, TaskIdError
from .nn import Conv2d, LayerNorm, Linear, Mlp, Module, parameter
from .backbone import WindowAttention
from .tensor import Tensor, concat, split, swapaxes, take

META_NAME = "prompts.meta.json"
DATA_NAME = "prompts.f32"

ARMS = ("full", "visual_only", "text_only", "no_prompt")


@dataclass
class PromptBank:
    """Precomputed text embeddings, one row per task."""

    embeddings: np.ndarray
    task_names: list[str]

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise FormatError(f"prompt bank needs a non-empty [T, dim] matrix, got shape {self.embeddings.shape}")
        if len(self.task_names) != self.embeddings.shape[0]:
            raise FormatError(f"{len(self.task_names)} task names for {self.embeddings.shape[0]} embeddings")
        if not np.all(np.isfinite(self.embeddings)):
            raise FormatError("prompt bank contains non-finite values")

    @property
    def num_tasks(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def synthetic(cls, num_tasks: int = 1, dim: int = 512, seed: int = 0) -> "PromptBank":
        """Unit-norm random rows, rounded through float32 so they survive a file round trip."""
        rows = np.random.default_rng(seed).normal(size=(num_tasks, dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(rows.astype("<f4").astype(np.float64), [f"task_{i}" for i in range(num_tasks)])


def _bank_paths(path: Union[str, os.PathLike]) -> tuple[Path, Path]:
    p = Path(path)
    if p.is_dir():
        return p / META_NAME, p / DATA_NAME
    if p.name == DATA_NAME:
        return p.with_name(META_NAME), p
    return p, p.with_name(DATA_NAME)


def load_prompt_bank(path: Union[str, os.PathLike]) -> PromptBank:
    """Read ``prompts.meta.json`` + ``prompts.f32`` (little-endian float32, row-major)."""
    meta_path, data_path = _bank_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise FormatError(f"prompt bank: not found: {meta_path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"prompt bank: {meta_path} is not valid JSON ({exc.msg} at byte offset {exc.pos})") from None
    for key in ("T", "dim", "task_names"):
        if key not in meta:
            raise FormatError(f"prompt bank: {meta_path} missing field {key!r}")
    t, dim = meta["T"], meta["dim"]
    if not isinstance(t, int) or t < 1:
        raise FormatError(f"prompt bank: T must be a positive integer, got {t!r}")
    if not isinstance(dim, int) or dim < 1:
        raise FormatError(f"prompt bank: dim must be a positive integer, got {dim!r}")
    if len(meta["task_names"]) != t:
        raise FormatError(f"prompt bank: {len(meta['task_names'])} task names but T={t}")
    try:
        raw = data_path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"prompt bank: not found: {data_path}") from None
    expected = t * dim * 4
    if len(raw) != expected:
        raise FormatError(
            f"prompt bank: {data_path.name} expected {expected} bytes (T={t} x dim={dim} x 4), "
            f"got {len(raw)}; payload ends at byte offset {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f4").reshape(t, dim)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError(f"prompt bank: non-finite value at byte offset {int(bad[0]) * 4}")
    return PromptBank(values.astype(np.float64), [str(n) for n in meta["task_names"]])


def write_prompt_bank(bank: PromptBank, directory: Union[str, os.PathLike]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"T": bank.num_tasks, "dim": bank.dim, "task_names": list(bank.task_names)}
    (directory / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (directory / DATA_NAME).write_bytes(bank.embeddings.astype("<f4").tobytes())


def select_text_embedding(
    bank: PromptBank,
    task_ids: Optional[Sequence[int]] = None,
    weights: Optional[np.ndarray] = None,
) -> Tensor:
    """Task-conditioned text vector per sample.

    With ``task_ids`` the one-hot combination reduces to an exact row gather.
    ``weights`` ([B, T]) gives the soft weighted combination instead.
    """
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[1] != bank.num_tasks:
            raise DimensionError(f"task weights must be [B, {bank.num_tasks}], got {weights.shape}")
        return Tensor(weights @ bank.embeddings)
    ids = np.asarray(task_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= bank.num_tasks):
        bad = ids[(ids < 0) | (ids >= bank.num_tasks)][0]
        raise TaskIdError(f"task id {int(bad)} outside [0, {bank.num_tasks})")
    return take(Tensor(bank.embeddings), ids, axis=0)


@dataclass
class PromptConfig:
    enabled: bool = True
    visual_enabled: bool = True
    text_enabled: bool = True
    inject_levels: list[int] = field(default_factory=lambda: [1, 2])
    d_p: Optional[int] = None
    S_p: int = 16
    fusion_heads: int = 4
    fusion_mlp_ratio: float = 2.0

    def __post_init__(self) -> None:
        self.inject_levels = sorted(int(v) for v in set(self.inject_levels))
        if any(level not in (0, 1, 2, 3) for level in self.inject_levels):
            raise ConfigError(f"prompts: inject_levels must be a subset of {{0,1,2,3}}, got {self.inject_levels}")
        if self.d_p is not None and self.d_p < 1:
            raise ConfigError(f"prompts: d_p must be positive, got {self.d_p}")
        if self.S_p < 1:
            raise ConfigError(f"prompts: S_p must be >= 1, got {self.S_p}")

    @classmethod
    def for_arm(cls, arm: str, **overrides) -> "PromptConfig":
        if arm not in ARMS:
            raise ConfigError(f"unknown ablation arm {arm!r}; expected one of {', '.join(ARMS)}")
        cfg = cls(**overrides)
        cfg.enabled = arm != "no_prompt"
        cfg.visual_enabled = arm in ("full", "visual_only")
        cfg.text_enabled = arm in ("full", "text_only")
        return cfg

    @property
    def arm(self) -> str:
        if not self.enabled:
            return "no_prompt"
        if self.visual_enabled and self.text_enabled:
            return "full"
        if self.visual_enabled:
            return "visual_only"
        if self.text_enabled:
            return "text_only"
        return "no_prompt"

    @classmethod
    def from_dict(cls, data: dict) -> "PromptConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"prompts: unknown keys {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


class TCSP(Module):
    """Text-conditioned spatial prompt generator for one feature geometry."""

    def __init__(self, text_dim: int, d_p: int, s_p: int, c_f: int, rng: np.random.Generator):
        self.d_p, self.s_p, self.c_f = d_p, s_p, c_f
        self.clip_proj = Linear(text_dim, d_p, rng, bias=False)
        self.visual_prompt = parameter(rng.normal(0.0, 1.0, size=(1, d_p, s_p, s_p)) * 0.001)
        self.log_tau = parameter(np.zeros(()))
        self.q_proj = Conv2d(d_p, d_p, 3, rng, padding=1, groups=d_p)
        self.k_proj = Conv2d(d_p, d_p, 3, rng, padding=1, groups=d_p)
        self.v_proj = Conv2d(d_p, d_p, 3, rng, padding=1, groups=d_p)
        self.ffn_dw = Conv2d(d_p, 2 * d_p, 3, rng, padding=1, groups=d_p)
        self.ffn_pw = Conv2d(d_p, d_p, 1, rng)
        self.out_proj = Conv2d(d_p, c_f, 3, rng, padding=1)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    def text_map(self, e_t: Tensor) -> Tensor:
        b = e_t.shape[0]
        projected = self.clip_proj(e_t).reshape(b, self.d_p, 1, 1)
        return F.interpolate(projected, self.s_p, self.s_p)

    def attention(self, e_t: Tensor, visual: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        """Returns the ``[B, S_p^2, S_p^2]`` attention matrix and the value tokens."""
        visual = self.visual_prompt if visual is None else visual
        n = self.s_p * self.s_p
        q = self.q_proj(self.text_map(e_t))
        b = q.shape[0]
        q = swapaxes(q.reshape(b, self.d_p, n), 1, 2)
        k = swapaxes(self.k_proj(visual).reshape(1, self.d_p, n), 1, 2)
        v = swapaxes(self.v_proj(visual).reshape(1, self.d_p, n), 1, 2)
        logits = (q @ swapaxes(k, 1, 2)) / (np.sqrt(self.d_p) * self.log_tau.exp())
        return F.softmax(logits, axis=-1), v

    def __call__(self, e_t: Tensor, height: int, width: int, use_visual: bool = True) -> Tensor:
        if use_visual:
            weights, v = self.attention(e_t)
            b = weights.shape[0]
            u = swapaxes(weights @ v, 1, 2).reshape(b, self.d_p, self.s_p, self.s_p)
        else:
            # no keys or values without the visual prompt; the query map goes straight to the FFN
            u = self.q_proj(self.text_map(e_t))
        a, gate = split(self.ffn_dw(u), 2, axis=1)
        refined = self.ffn_pw(F.gelu(a) * gate)
        return self.out_proj(F.interpolate(refined, height, width))


class PromptFusion(Module):
    """Channel concat, one pre-norm transformer block over spatial tokens, 1x1 projection back."""

    def __init__(self, channels: int, num_heads: int, mlp_ratio: float, rng: np.random.Generator):
        width = 2 * channels
        if width % num_heads:
            raise ConfigError(f"prompt fusion: width {width} not divisible by {num_heads} heads")
        self.channels = channels
        self.norm1 = LayerNorm(width)
        self.attn = WindowAttention(width, num_heads, qk_norm=False, rng=rng)
        self.norm2 = LayerNorm(width)
        self.mlp = Mlp(width, int(round(mlp_ratio * width)), rng)
        self.proj = Conv2d(width, channels, 1, rng)

    def __call__(self, feat: Tensor, prompt: Tensor) -> Tensor:
        if feat.shape != prompt.shape:
            raise DimensionError(f"prompt fusion: feature {feat.shape} and prompt {prompt.shape} differ")
        b, c, h, w = feat.shape
        tokens = concat([feat, prompt], axis=1).transpose(0, 2, 3, 1).reshape(b, h * w, 2 * c)
        tokens = tokens + self.attn(self.norm1(tokens))
        tokens = tokens + self.mlp(self.norm2(tokens))
        return self.proj(tokens.reshape(b, h, w, 2 * c).transpose(0, 3, 1, 2))


def fuse_prompt(feat: Tensor, prompt: Tensor, fusion: PromptFusion) -> Tensor:
    return fusion(feat, prompt)


class PromptSystem(Module):
    """One TCSP generator and one fusion block per injection level."""

    def __init__(self, config: PromptConfig, bank: PromptBank, level_dims: Sequence[int], rng: np.random.Generator):
        self.config = config
        self.bank = bank
        levels = config.inject_levels
        if any(level >= len(level_dims) for level in levels):
            raise ConfigError(f"prompts: inject_levels {levels} exceed the {len(level_dims)} backbone levels")
        d_p = config.d_p or (level_dims[levels[0]] if levels else 1)
        self.d_p = d_p
        self.tcsp = {str(level): TCSP(bank.dim, d_p, config.S_p, level_dims[level], rng) for level in levels}
        self.fusion = {
            str(level): PromptFusion(level_dims[level], config.fusion_heads, config.fusion_mlp_ratio, rng)
            for level in levels
        }

    def text_vector(self, task_ids: Sequence[int]) -> Tensor:
        e_t = select_text_embedding(self.bank, task_ids)
        if not self.config.text_enabled:
            # frozen unit-norm constant: queries then depend on prompt geometry only
            e_t = Tensor(np.full(e_t.shape, 1.0 / np.sqrt(self.bank.dim)))
        return e_t

    def hook(self, task_ids: Sequence[int]):
        """Build the per-level callback the backbone invokes after each stage."""
        cfg = self.config
        if not cfg.enabled or not cfg.inject_levels:
            return lambda level, feat: feat
        # the prompt depends on the sample only through its task id
        unique, inverse = np.unique(np.asarray(task_ids, dtype=np.int64).reshape(-1), return_inverse=True)
        e_t = self.text_vector(unique)

        def apply(level: int, feat: Tensor) -> Tensor:
            if level not in cfg.inject_levels:
                return feat
            _, _, h, w = feat.shape
            prompt = self.tcsp[str(level)](e_t, h, w, cfg.visual_enabled)
            return fuse_prompt(feat, take(prompt, inverse, axis=0), self.fusion[str(level)])

        return apply

    def modality_parameter_names(self) -> dict[str, list[str]]:
        """Parameters owned by each prompt modality, relative to this module."""
        visual, text = [], []
        for level, module in self.tcsp.items():
            for name, _ in module.named_parameters():
                if name == "visual_prompt" or name == "log_tau" or name.startswith(("k_proj.", "v_proj.")):
                    visual.append(f"tcsp.{level}.{name}")
                elif name.startswith("clip_proj."):
                    text.append(f"tcsp.{level}.{name}")
        return {"visual": visual, "text": text}

    def frozen_parameter_names(self) -> list[str]:
        """Names that must receive no updates under the configured arm."""
        if not self.config.enabled:
            return [name for name, _ in self.named_parameters()]
        names = self.modality_parameter_names()
        frozen = []
        if not self.config.visual_enabled:
            frozen += names["visual"]
        if not self.config.text_enabled:
            frozen += names["text"]
        return frozen


def prompt_hook(system: PromptSystem, level: int, feat: Tensor, task_ids: Sequence[int]) -> Tensor:
    return system.hook(task_ids)(level, feat)
