"""Neural-network primitives built on :mod:`vphype.tensor`.

Heavier primitives (normalisation, convolution) carry fused backward rules;
everything else is composed from tensor ops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .errors import ContractError, DimensionError, StateError
from .tensor import (
    Tensor,
    as_tensor,
    is_grad_enabled,
    make_result,
    matmul,
    mul,
    no_grad,
    record_flops,
    take,
)

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    record_flops("relu", out.size)
    return make_result(out, (x,), lambda g: (g * (x.data > 0),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    record_flops("sigmoid", out.size)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    out = x.data * s
    record_flops("silu", out.size)
    return make_result(out, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),), "silu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    out = x.data * cdf
    record_flops("gelu", out.size)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out, (x,), backward, "gelu")


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    record_flops("softplus", out.size)
    return make_result(out, (x,), lambda g: (g * expit(x.data),), "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    record_flops("softmax", 4 * out.size)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    record_flops("log_softmax", 4 * out.size)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# normalisation


def _normalize(x: np.ndarray, axes: tuple[int, ...], eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mu) * inv, inv, mu, var


def _normalize_backward(dxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes: tuple[int, ...]):
    return inv * (
        dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
    )


def layernorm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    if eps <= 0:
        raise ContractError(f"layernorm eps must be positive, got {eps}")
    x = as_tensor(x)
    xhat, inv, _, _ = _normalize(x.data, (-1,), eps)
    g_data = gamma.data if gamma is not None else 1.0
    b_data = beta.data if beta is not None else 0.0
    out = xhat * g_data + b_data
    record_flops("layernorm", 8 * out.size)
    parents = [x] + [p for p in (gamma, beta) if p is not None]
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        grads = [_normalize_backward(g * g_data, xhat, inv, (-1,)) if x.requires_grad else None]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return make_result(out, parents, backward, "layernorm")


@dataclass
class BatchNormState:
    """Running statistics of a 2-D batch normalisation layer."""

    running_mean: Optional[np.ndarray]
    running_var: Optional[np.ndarray]
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalisation over (B, H, W).

    Training mode normalises with batch statistics and folds them into the
    running estimates with momentum ``state.momentum`` (unbiased variance for
    the running estimate). Inference uses the running estimates.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm2d expects [B,{gamma.shape[0]},H,W], got {x.shape}")
    axes = (0, 2, 3)
    gshape = (1, -1, 1, 1)
    gd, bd = gamma.data.reshape(gshape), beta.data.reshape(gshape)
    record_flops("batchnorm", 8 * x.size)
    if training:
        xhat, inv, mu, var = _normalize(x.data, axes, state.eps)
        n = x.size // x.shape[1]
        m = state.momentum
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        if state.running_mean is None or state.running_var is None:
            state.running_mean = mu.reshape(-1).copy()
            state.running_var = unbiased.copy()
        else:
            state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(-1)
            state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        if state.running_mean is None or state.running_var is None:
            raise StateError("batchnorm inference requested before running statistics were initialised")
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).reshape(gshape)
        xhat = (x.data - state.running_mean.reshape(gshape)) * inv
    out = xhat * gd + bd

    def backward(g):
        if not x.requires_grad:
            gx = None
        elif training:
            gx = _normalize_backward(g * gd, xhat, inv, axes)
        else:
            gx = g * gd * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    b, cin, h, wd = x.shape
    cout, cin_g, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square with odd size, got {w.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}, groups={groups}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < k or wp < k:
        raise DimensionError(f"conv2d kernel {k}x{k} larger than padded input {hp}x{wp} (input {x.shape})")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    depthwise = groups == cin and cin_g == 1
    mult = cout // groups
    if groups == 1:
        out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    elif depthwise:
        # out channel g*mult + o reads only input channel g
        wd_ = w.data.reshape(cin, mult, k, k)
        out = np.zeros((b, cin, mult, ho, wo))
        for i in range(k):
            for j in range(k):
                tap = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                out += tap[:, :, None] * wd_[None, :, :, i, j, None, None]
        out = out.reshape(b, cout, ho, wo)
    else:
        cout_g = cout // groups
        wg = win.reshape(b, groups, cin_g, ho, wo, k, k)
        out = np.einsum("bgchwij,gocij->bgohw", wg, w.data.reshape(groups, cout_g, cin_g, k, k), optimize=True)
        out = out.reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    record_flops("conv2d", 2 * b * cout * ho * wo * cin_g * k * k)

    def backward(g):
        gx = gw = gb = None
        if groups == 1:
            if w.requires_grad:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
                gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        elif depthwise:
            gg = g.reshape(b, cin, mult, ho, wo)
            wd_ = w.data.reshape(cin, mult, k, k)
            gw = np.empty((cin, mult, k, k)) if w.requires_grad else None
            gxp = np.zeros_like(xp) if x.requires_grad else None
            for i in range(k):
                for j in range(k):
                    sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                    if gw is not None:
                        gw[:, :, i, j] = np.einsum("bcmhw,bchw->cm", gg, xp[sl])
                    if gxp is not None:
                        gxp[sl] += (gg * wd_[None, :, :, i, j, None, None]).sum(axis=2)
            gw = gw.reshape(w.shape) if gw is not None else None
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if gxp is not None else None
        else:
            cout_g = cout // groups
            gg = g.reshape(b, groups, cout_g, ho, wo)
            wr = w.data.reshape(groups, cout_g, cin_g, k, k)
            if w.requires_grad:
                wg = win.reshape(b, groups, cin_g, ho, wo, k, k)
                gw = np.einsum("bgohw,bgchwij->gocij", gg, wg, optimize=True).reshape(w.shape)
            if x.requires_grad:
                gxp = np.zeros_like(xp).reshape(b, groups, cin_g, hp, wp)
                for i in range(k):
                    for j in range(k):
                        contrib = np.einsum("bgohw,goc->bgchw", gg, wr[:, :, :, i, j], optimize=True)
                        gxp[:, :, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
                gx = gxp.reshape(b, cin, hp, wp)[:, :, padding : padding + h, padding : padding + wd]
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) + ((gb,) if bias is not None else ())

    parents = (x, w) + ((bias,) if bias is not None else ())
    return make_result(out, parents, backward, "conv2d")


def depthwise_conv1d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Causal depthwise convolution over the last axis of ``[M, C, L]``.

    The input is left-padded with ``k - 1`` zeros, so ``w[:, -1]`` is the
    tap on the current position and output length equals input length.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"depthwise_conv1d channel mismatch: input {x.shape}, weight {w.shape}")
    m, c, length = x.shape
    k = w.shape[1]
    xp = np.pad(x.data, ((0, 0), (0, 0), (k - 1, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += w.data[None, :, j, None] * xp[:, :, j : j + length]
    if bias is not None:
        out += bias.data[None, :, None]
    record_flops("depthwise_conv1d", 2 * m * c * length * k)

    def backward(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gw[:, j] = (g * xp[:, :, j : j + length]).sum(axis=(0, 2))
            gxp[:, :, j : j + length] += g * w.data[None, :, j, None]
        grads = (gxp[:, :, k - 1 :], gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2)),)
        return grads

    parents = (x, w) + ((bias,) if bias is not None else ())
    return make_result(out, parents, backward, "depthwise_conv1d")


# ---------------------------------------------------------------------------
# resampling and padding


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows map output positions to input weights (half-pixel, align_corners=False)."""
    mat = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        mat[o, i0] += 1.0 - lam
        mat[o, i1] += lam
    return mat


def interpolate(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"interpolate target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    if mode == "nearest":
        rows = np.minimum(np.floor(np.arange(out_h) * h / out_h).astype(int), h - 1)
        cols = np.minimum(np.floor(np.arange(out_w) * w / out_w).astype(int), w - 1)
        return take(take(x, rows, axis=-2), cols, axis=-1)
    if mode != "bilinear":
        raise ContractError(f"unknown interpolation mode {mode!r}")
    out = matmul(Tensor(bilinear_matrix(h, out_h)), x)
    return matmul(out, Tensor(bilinear_matrix(w, out_w).T))


def reflect_indices(n: int, before: int, after: int) -> np.ndarray:
    """Source indices for mirror padding without edge repetition."""
    if n == 1:
        return np.zeros(n + before + after, dtype=np.intp)
    return np.pad(np.arange(n), (before, after), mode="reflect")


def pad_reflect(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    x = as_tensor(x)
    if top == bottom == left == right == 0:
        return x
    h, w = x.shape[-2:]
    x = take(x, reflect_indices(h, top, bottom), axis=-2)
    return take(x, reflect_indices(w, left, right), axis=-1)


# ---------------------------------------------------------------------------
# regularisation


def drop_path(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Zero whole samples (first axis) with probability ``p``; survivors scale by 1/(1-p)."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        return mul(x, 0.0)
    if rng is None:
        raise ContractError("drop_path in training mode needs an explicit random generator")
    keep = (rng.random(x.shape[0]) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, keep.reshape((-1,) + (1,) * (x.ndim - 1)))


# ---------------------------------------------------------------------------
# finite-difference gradient check


def grad_check(
    f: Callable[..., Tensor],
    inputs: Union[Tensor, Sequence[Tensor]],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Returns the maximum over checked coordinates of
    ``|a - b| / max(1, |a|, |b|)``. With ``max_coords`` set, that many
    coordinates per input are sampled (seeded) instead of all of them.
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    if not is_grad_enabled():
        raise ContractError("grad_check called inside no_grad()")
    y = f(*tensors)
    if y.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    y.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f(*tensors).item()
                flat[i] = orig - h
                fm = f(*tensors).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return out + b if b is not None else out


def constant(shape: Sequence[int], value: float) -> Tensor:
    return Tensor(np.full(tuple(shape), float(value)))
