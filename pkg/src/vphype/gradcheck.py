"""Finite-difference gradient suite over every differentiable primitive and a tiny end-to-end model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .backbone import ModelConfig, window_partition, window_reverse
from .functional import BatchNormState
from .head import cross_entropy
from .model import VPHype
from .prompts import PromptBank, PromptConfig
from .scan import selective_scan
from .tensor import Tensor, concat, getitem, matmul, split, sqrt, take, tsum

TOLERANCE = 1e-5


@dataclass
class GradCase:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _weighted(fn: Callable[..., Tensor], out_shape, seed: int) -> Callable[..., Tensor]:
    """Contract a tensor-valued function with fixed random weights to get a non-trivial scalar."""
    w = np.random.default_rng(seed + 1000).normal(size=out_shape)
    return lambda *xs: tsum(fn(*xs) * w)


def _primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable[..., Tensor], list[np.ndarray]]]:
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    bn = BatchNormState.fresh(3)
    adv = np.array([2, 0, 2, 1])
    labels = np.array([0, 2, 1, 2])

    def scan_fn(u, delta, a_log, b, c, d):
        return selective_scan(u, delta, -a_log.exp(), b, c, d)

    def window_fn(x):
        return window_reverse(window_partition(x, 2) * 1.5, 2, 2, 4, 4)

    return [
        ("add", lambda a, b: a + b, [r(3, 4), r(4)]),
        ("sub", lambda a, b: a - b, [r(3, 1), r(3, 4)]),
        ("mul", lambda a, b: a * b, [r(2, 3), r(2, 1)]),
        ("div", lambda a, b: a / b, [r(3, 4), pos(3, 4)]),
        ("pow", lambda a: a**3, [r(5)]),
        ("exp", lambda a: a.exp(), [r(5)]),
        ("log", lambda a: a.log(), [pos(5)]),
        ("sqrt", sqrt, [pos(5)]),
        ("sum", lambda a: a.sum(axis=1, keepdims=True) * a, [r(3, 4)]),
        ("mean", lambda a: a.mean(axis=0) * 2.0, [r(3, 4)]),
        ("reshape_transpose", lambda a: a.reshape(4, 3).transpose(1, 0), [r(3, 4)]),
        ("concat", lambda a, b: concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
        ("split", lambda a: split(a, 2, axis=1)[1] * split(a, 2, axis=1)[0], [r(2, 4)]),
        ("getitem_basic", lambda a: getitem(a, (slice(1, None), slice(None, None, 2))), [r(3, 4)]),
        ("getitem_advanced", lambda a: getitem(a, adv), [r(3, 4)]),
        ("take", lambda a: take(a, adv, axis=0), [r(3, 4)]),
        ("matmul", lambda a, b: matmul(a, b), [r(2, 3, 4), r(4, 5)]),
        ("relu", F.relu, [r(6) + np.sign(r(6)) * 0.1]),
        ("sigmoid", F.sigmoid, [r(6)]),
        ("silu", F.silu, [r(6)]),
        ("gelu", F.gelu, [r(6)]),
        ("softplus", F.softplus, [r(6)]),
        ("softmax", lambda a: F.softmax(a, axis=-1), [r(3, 5)]),
        ("log_softmax", lambda a: F.log_softmax(a, axis=0), [r(3, 5)]),
        ("layernorm", lambda a, g, b: F.layernorm(a, g, b), [r(3, 6), r(6), r(6)]),
        ("batchnorm2d_train", lambda a, g, b: F.batchnorm2d(a, g, b, bn, training=True), [r(4, 3, 2, 2), r(3), r(3)]),
        ("conv2d", lambda x, w, b: F.conv2d(x, w, b, 1, 1), [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)]),
        ("conv2d_strided", lambda x, w: F.conv2d(x, w, None, 2, 1), [r(1, 2, 6, 6), r(3, 2, 3, 3)]),
        ("conv2d_grouped", lambda x, w: F.conv2d(x, w, None, 1, 1, groups=2), [r(1, 4, 4, 4), r(6, 2, 3, 3)]),
        ("conv2d_depthwise", lambda x, w, b: F.conv2d(x, w, b, 1, 1, groups=3), [r(2, 3, 4, 4), r(6, 1, 3, 3), r(6)]),
        ("depthwise_conv1d", F.depthwise_conv1d, [r(2, 3, 7), r(3, 3), r(3)]),
        ("interpolate_bilinear", lambda x: F.interpolate(x, 5, 7), [r(1, 2, 3, 4)]),
        ("interpolate_nearest", lambda x: F.interpolate(x, 4, 6, mode="nearest"), [r(1, 2, 2, 3)]),
        ("pad_reflect", lambda x: F.pad_reflect(x, 1, 2, 2, 1), [r(1, 2, 3, 4)]),
        ("window_roundtrip", window_fn, [r(2, 3, 4, 4)]),
        ("selective_scan", scan_fn, [r(2, 3, 6), pos(2, 3, 6), r(3, 4) * 0.3, r(2, 4, 6), r(2, 4, 6), r(3)]),
        ("cross_entropy", lambda z: cross_entropy(z, labels), [r(4, 3)]),
    ]


def tiny_gradcheck_model(seed: int = 0) -> VPHype:
    config = ModelConfig.tiny(
        in_bands=4, num_classes=3, base_dim=8, depths=[1, 1, 1, 1], window_sizes=[8, 4, 2, 1], num_heads=[2, 2, 4, 4]
    )
    prompts = PromptConfig(inject_levels=[1, 2], S_p=4)
    return VPHype(config, prompts, PromptBank.synthetic(num_tasks=2, dim=16, seed=seed), seed=seed)


def run_gradient_suite(
    max_coords: Optional[int] = 8, seed: int = 0, include_model: bool = True
) -> list[GradCase]:
    """Run every case.

    Primitive inputs are small, so every coordinate is checked. For the
    end-to-end model ``max_coords`` coordinates per parameter tensor are
    sampled (seeded), keeping the suite inside its time budget.
    """
    rng = np.random.default_rng(seed)
    results = []
    for i, (name, fn, arrays) in enumerate(_primitive_cases(rng)):
        start = time.perf_counter()
        tensors = [Tensor(a.copy()) for a in arrays]
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
        err = F.grad_check(_weighted(fn, out_shape, seed + i), tensors, seed=seed)
        results.append(GradCase(name, err, time.perf_counter() - start))
    if include_model:
        results.extend(_model_cases(seed, max_coords))
    return results


def _model_cases(seed: int, max_coords: Optional[int]) -> list[GradCase]:
    model = tiny_gradcheck_model(seed)
    rng = np.random.default_rng(seed + 7)
    images = rng.normal(size=(2, 4, 8, 8))
    tasks = np.array([1, 0])
    names, params = zip(*model.named_parameters())
    out = []
    for mode, training in (("eval", False), ("train", True)):
        start = time.perf_counter()
        weights = np.random.default_rng(seed + 11).normal(size=(2, 3))

        def loss(*_params, training=training, weights=weights):
            return tsum(model(Tensor(images), tasks, training=training) * weights)

        err = F.grad_check(loss, list(params), max_coords=max_coords, seed=seed)
        out.append(GradCase(f"model_end_to_end_{mode}", err, time.perf_counter() - start))
    return out
