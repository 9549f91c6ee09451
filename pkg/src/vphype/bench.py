"""Mixer scaling benchmark: selective-scan mixer vs full (single-window) attention.

Each mixer runs forward-only on a ``[1, L, d]`` sequence. Attention sees the
whole sequence as one window so its quadratic term is exercised. Timings
cover the whole mixer; the FLOP column counts the sequence-mixing core only
(the scan primitive, or scores + softmax + weighted sum), which is exactly
linear or exactly quadratic in L.
"""

from __future__ import annotations

import io
import csv
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .backbone import MambaMixer, WindowAttention
from .errors import ConfigError
from .tensor import Tensor, count_flops, no_grad, swapaxes

CSV_HEADER = ("mixer", "L", "flops", "median_ns", "slope")
DEFAULT_LENGTHS = (256, 512, 1024, 2048, 4096)


@dataclass
class BenchRow:
    mixer: str
    length: int
    flops: int
    median_ns: int
    slope: float = float("nan")


def loglog_slope(lengths: Sequence[float], times: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(L)."""
    slope, _ = np.polyfit(np.log(np.asarray(lengths, dtype=np.float64)), np.log(np.asarray(times, dtype=np.float64)), 1)
    return float(slope)


def validate_lengths(lengths: Sequence[int]) -> list[int]:
    lengths = [int(v) for v in lengths]
    if len(lengths) < 4:
        raise ConfigError(f"bench: need at least 4 lengths, got {len(lengths)}")
    if any(b <= a for a, b in zip(lengths, lengths[1:])) or lengths[0] < 1:
        raise ConfigError(f"bench: lengths must be positive and strictly ascending, got {lengths}")
    if lengths[-1] < 16 * lengths[0]:
        raise ConfigError(f"bench: lengths must span at least 16x, got {lengths[0]}..{lengths[-1]}")
    return lengths


def build_mixers(dim: int, seed: int = 0, heads: int = 1) -> dict[str, Callable[[Tensor], Tensor]]:
    rng = np.random.default_rng(seed)
    return {
        "scan": MambaMixer(dim, d_state=16, d_conv=3, expand=1, rng=rng),
        "attention": WindowAttention(dim, heads, qk_norm=True, rng=rng),
    }


def mixer_flops(mixer: Callable[[Tensor], Tensor], dim: int, length: int) -> int:
    """Operation count of one whole forward pass, from the primitive counters."""
    x = Tensor(np.zeros((1, length, dim)))
    with no_grad(), count_flops() as counter:
        mixer(x)
    return counter.total


def core_flops(mixer: Callable[[Tensor], Tensor], dim: int, length: int) -> int:
    """Operation count of the sequence-mixing core only."""
    if isinstance(mixer, MambaMixer):
        x = Tensor(np.zeros((1, length, dim)))
        with no_grad(), count_flops() as counter:
            mixer(x)
        return counter.by_op["selective_scan"]
    if isinstance(mixer, WindowAttention):
        shape = (1, mixer.num_heads, length, mixer.head_dim)
        q, k, v = (Tensor(np.zeros(shape)) for _ in range(3))
        with no_grad(), count_flops() as counter:
            F.softmax((q @ swapaxes(k, -1, -2)) * mixer.scale, axis=-1) @ v
        return counter.total
    raise TypeError(f"unknown mixer {type(mixer).__name__}")


def time_mixer(mixer: Callable[[Tensor], Tensor], dim: int, length: int, repeats: int, seed: int = 0) -> int:
    x = Tensor(np.random.default_rng(seed).normal(size=(1, length, dim)))
    samples = []
    with no_grad():
        mixer(x)  # warm-up
        for _ in range(repeats):
            start = time.perf_counter_ns()
            mixer(x)
            samples.append(time.perf_counter_ns() - start)
    return int(np.median(samples))


def run_bench(
    dim: int = 64,
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    repeats: int = 5,
    seed: int = 0,
    heads: int = 1,
) -> list[BenchRow]:
    lengths = validate_lengths(lengths)
    if repeats < 1:
        raise ConfigError(f"bench: repeats must be >= 1, got {repeats}")
    rows: list[BenchRow] = []
    for name, mixer in build_mixers(dim, seed, heads).items():
        mine = [
            BenchRow(name, length, core_flops(mixer, dim, length), time_mixer(mixer, dim, length, repeats, seed))
            for length in lengths
        ]
        slope = loglog_slope([r.length for r in mine], [max(r.median_ns, 1) for r in mine])
        for r in mine:
            r.slope = slope
        rows.extend(mine)
    return rows


def rows_to_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.mixer, r.length, r.flops, r.median_ns, f"{r.slope:.6f}"])
    return buf.getvalue()


def slopes(rows: Sequence[BenchRow]) -> dict[str, float]:
    return {r.mixer: r.slope for r in rows}
