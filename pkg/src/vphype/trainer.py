"""AdamW training loop, evaluation and checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .backbone import ModelConfig
from .data import HsiScene, Split, extract_patches
from .errors import CheckpointError, ConfigError, TrainingError
from .head import cross_entropy
from .metrics import ConfusionMatrix, compute_metrics
from .model import VPHype
from .prompts import PromptBank, PromptConfig
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VPHYPECK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    warmup_steps: Optional[int] = None
    grad_clip_norm: Optional[float] = 1.0
    val_size: int = 256
    eval_batch_size: int = 256

    def __post_init__(self) -> None:
        self.betas = (float(self.betas[0]), float(self.betas[1]))
        if self.lr < 0:
            raise ConfigError(f"train: lr must be non-negative, got {self.lr}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"train: betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ConfigError(f"train: eps must be positive, got {self.eps}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train: batch_size and epochs must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"train: unknown keys {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# optimiser


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: dict[str, tuple[np.ndarray, np.ndarray]],
    t: int,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    if t < 1:
        raise ValueError(f"AdamW step counter starts at 1, got {t}")
    b1, b2 = betas
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter has {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name}")
        m, v = moments.setdefault(name, (np.zeros_like(theta), np.zeros_like(theta)))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            theta -= lr * weight_decay * theta
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, named_params: Sequence[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = dict(named_params)
        self.cfg = cfg
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}
        adamw_step(
            {n: p.data for n, p in self.params.items()},
            grads,
            self.moments,
            self.t,
            lr,
            self.cfg.weight_decay,
            self.cfg.betas,
            self.cfg.eps,
        )


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def cosine_lr(step: int, total: int, base_lr: float, warmup: int) -> float:
    """Linear warmup over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(1.0, progress)))


# ---------------------------------------------------------------------------
# evaluation


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("VPHYPE_THREADS", "1")))
    except ValueError:
        return 1


def predict(model: VPHype, patches: np.ndarray, task_id: int = 0, batch_size: int = 256) -> np.ndarray:
    def run(start: int) -> np.ndarray:
        with no_grad():
            chunk = patches[start : start + batch_size]
            logits = model(Tensor(chunk), np.full(len(chunk), task_id), training=False)
            return logits.data.argmax(axis=1)

    starts = list(range(0, len(patches), batch_size))
    threads = eval_threads()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def evaluate(
    model: VPHype,
    scene: HsiScene,
    pixels: np.ndarray,
    patch_size: int,
    task_id: int = 0,
    batch_size: int = 256,
) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(scene.num_classes, scene.class_names)
    for start in range(0, len(pixels), 4 * batch_size):
        patches, labels = extract_patches(scene, pixels[start : start + 4 * batch_size], patch_size)
        cm.update(labels, predict(model, patches, task_id, batch_size))
    return cm


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: VPHype
    optimizer: AdamW
    rng: np.random.Generator
    log: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.log[-1]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch statistics need at least two samples
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def validation_pixels(split: Split, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5EED])
    if size >= len(split.test):
        return split.test
    return np.sort(rng.choice(split.test, size=size, replace=False))


def train(
    model: VPHype,
    scene: HsiScene,
    split: Split,
    cfg: TrainConfig,
    patch_size: int = 15,
    task_id: int = 0,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train with AdamW + warmup/cosine schedule; deterministic for a fixed seed.

    Parameters frozen by the prompt arm are excluded from the optimiser.
    Every epoch logs mean loss and OA on a fixed validation slice of the test
    pixels; the final epoch also reports OA/AA/Kappa on the full test split.
    """
    scene.fit_band_stats(split.train)
    x_train, y_train = extract_patches(scene, split.train, patch_size)
    val = validation_pixels(split, cfg.val_size, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    trainable = model.trainable_parameters()
    optimizer = AdamW(trainable, cfg)
    params = [p for _, p in trainable]
    steps_per_epoch = len(_batches(len(y_train), cfg.batch_size, np.random.default_rng(0)))
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else int(round(0.05 * total))
    result = TrainResult(model, optimizer, rng)
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for batch in _batches(len(y_train), cfg.batch_size, rng):
            model.zero_grad()
            tasks = np.full(len(batch), task_id)
            loss = cross_entropy(model(Tensor(x_train[batch]), tasks, training=True, rng=rng), y_train[batch])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at step {step}")
            loss.backward()
            if cfg.grad_clip_norm:
                clip_grad_norm(params, cfg.grad_clip_norm)
            optimizer.step(cosine_lr(step, total, cfg.lr, warmup))
            losses.append(loss.item())
            step += 1
        record = {
            "epoch": epoch + 1,
            "step": step,
            "loss": float(np.mean(losses)),
            "lr": cosine_lr(step - 1, total, cfg.lr, warmup),
            "val_oa": compute_metrics(evaluate(model, scene, val, patch_size, task_id, cfg.eval_batch_size)).overall_accuracy,
        }
        if epoch == cfg.epochs - 1:
            m = compute_metrics(evaluate(model, scene, split.test, patch_size, task_id, cfg.eval_batch_size))
            record["test"] = {"OA": m.overall_accuracy, "AA": m.average_accuracy, "Kappa": m.kappa}
        logger.info("epoch %d loss %.4f val_oa %.4f", record["epoch"], record["loss"], record["val_oa"])
        result.log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return result


def write_metrics_log(log: Sequence[dict], path: Union[str, os.PathLike]) -> None:
    with open(path, "w") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: dict
    prompt_config: dict
    task_names: list[str]
    arrays: dict[str, np.ndarray]
    step: int = 0
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def checkpoint_from(
    model: VPHype,
    optimizer: Optional[AdamW] = None,
    rng: Optional[np.random.Generator] = None,
    extra: Optional[dict] = None,
) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
    for name, state in model.named_batchnorm_states():
        arrays[f"buffer/{name}.running_mean"] = state.running_mean
        arrays[f"buffer/{name}.running_var"] = state.running_var
    arrays["buffer/prompt_bank"] = model.bank.embeddings
    step = 0
    if optimizer is not None:
        step = optimizer.t
        for name, (m, v) in optimizer.moments.items():
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
    return Checkpoint(
        model.config.to_dict(),
        model.prompt_config.to_dict(),
        list(model.bank.task_names),
        {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()},
        step,
        rng.bit_generator.state if rng is not None else None,
        dict(extra or {}),
    )


def save_checkpoint(path: Union[str, os.PathLike], ckpt: Checkpoint) -> None:
    """Magic, u64 header length, JSON header, float64 blob, then SHA-256 of everything before it."""
    index = {}
    blobs = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = ckpt.arrays[name]
        raw = arr.astype("<f8").tobytes()
        index[name] = {"dtype": "<f8", "shape": list(arr.shape), "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config,
        "prompt_config": ckpt.prompt_config,
        "task_names": ckpt.task_names,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "index": index,
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def _config_diff(a: dict, b: dict) -> list[str]:
    return sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))


def load_checkpoint(path: Union[str, os.PathLike], expect_model_config: Optional[ModelConfig] = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"not found: {path}") from None
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 + 32 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"digest mismatch in {path}; file is corrupted")
    (head_len,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16 : 16 + head_len])
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    blob = body[16 + head_len :]
    arrays = {}
    for name, meta in header["index"].items():
        chunk = blob[meta["offset"] : meta["offset"] + meta["length"]]
        arrays[name] = np.frombuffer(chunk, dtype=meta["dtype"]).reshape(meta["shape"]).astype(np.float64)
    if expect_model_config is not None:
        diff = _config_diff(expect_model_config.to_dict(), header["model_config"])
        if diff:
            raise CheckpointError(f"config mismatch; differing keys: {', '.join(diff)}")
    return Checkpoint(
        header["model_config"],
        header["prompt_config"],
        header["task_names"],
        arrays,
        header["step"],
        header["rng_state"],
        header["extra"],
    )


def restore_model(ckpt: Checkpoint) -> VPHype:
    config = ModelConfig.from_dict(ckpt.model_config)
    bank = PromptBank(ckpt.arrays["buffer/prompt_bank"], list(ckpt.task_names))
    model = VPHype(config, PromptConfig.from_dict(ckpt.prompt_config), bank)
    params = dict(model.named_parameters())
    expected = {f"param/{n}" for n in params}
    stored = {k for k in ckpt.arrays if k.startswith("param/")}
    if expected != stored:
        missing = sorted(expected - stored)[:5]
        unexpected = sorted(stored - expected)[:5]
        raise CheckpointError(f"parameter set mismatch; missing {missing}, unexpected {unexpected}")
    for name, p in params.items():
        p.data[...] = ckpt.arrays[f"param/{name}"]
    for name, state in model.named_batchnorm_states():
        state.running_mean = ckpt.arrays[f"buffer/{name}.running_mean"].copy()
        state.running_var = ckpt.arrays[f"buffer/{name}.running_var"].copy()
    return model


def restore_optimizer(ckpt: Checkpoint, model: VPHype, cfg: TrainConfig) -> AdamW:
    opt = AdamW(model.trainable_parameters(), cfg)
    opt.t = ckpt.step
    for key, value in ckpt.arrays.items():
        if key.startswith("adam_m/"):
            name = key[len("adam_m/") :]
            opt.moments[name] = (value.copy(), ckpt.arrays[f"adam_v/{name}"].copy())
    return opt
