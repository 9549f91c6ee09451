"""Selective state-space scan.

Recurrence per (sample m, channel c), with h_0 = 0::

    h_t = exp(delta_t * A[c]) * h_{t-1} + delta_t * B_t * u_t
    y_t = <C_t, h_t> + D[c] * u_t

``A`` is discretised by zero-order hold, ``B`` by an Euler step.
Layouts: u, delta ``[M, C, L]``; A ``[C, N]``; B, C ``[M, N, L]``; D ``[C]``.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, make_result, record_flops

# multiply-adds per (m, c, n, t) in the recurrence and readout
_FLOPS_PER_STATE = 7
_FLOPS_PER_CHANNEL = 2


def scan_flops(m: int, c: int, n: int, length: int) -> int:
    return m * c * length * (_FLOPS_PER_STATE * n + _FLOPS_PER_CHANNEL)


def _check(u, delta, A, B, C, D) -> tuple[int, int, int, int]:
    if u.ndim != 3:
        raise DimensionError(f"selective_scan: u must be [M, C, L], got {u.shape}")
    m, c, length = u.shape
    n = A.shape[-1]
    expected = {
        "delta": (delta.shape, (m, c, length)),
        "A": (A.shape, (c, n)),
        "B": (B.shape, (m, n, length)),
        "C": (C.shape, (m, n, length)),
        "D": (D.shape, (c,)),
    }
    for name, (got, want) in expected.items():
        if got != want:
            raise DimensionError(f"selective_scan: {name} has shape {got}, expected {want}")
    if not np.all(delta > 0):
        raise ContractError("selective_scan: delta must be strictly positive")
    return m, c, n, length


def scan_reference(u, delta, A, B, C, D) -> np.ndarray:
    """Plain sequential recurrence on numpy arrays, one time step at a time."""
    m, c, n, length = _check(u, delta, A, B, C, D)
    h = np.zeros((m, c, n))
    y = np.empty((m, c, length))
    for t in range(length):
        dt = delta[:, :, t, None]
        h = np.exp(dt * A[None]) * h + dt * B[:, None, :, t] * u[:, :, t, None]
        y[:, :, t] = np.einsum("mcn,mn->mc", h, C[:, :, t]) + D[None] * u[:, :, t]
    return y


def scan_chunked(u, delta, A, B, C, D, chunk: int = 16) -> np.ndarray:
    """Chunk-parallel evaluation of the same recurrence.

    Inside a chunk the state is a decay-weighted sum of the chunk's inputs
    plus the decayed carry-in state; decays use differences of cumulative
    log-decay, which are always <= 0 because ``A < 0`` and ``delta > 0``.
    """
    m, c, n, length = _check(u, delta, A, B, C, D)
    h = np.zeros((m, c, n))
    y = np.empty((m, c, length))
    for start in range(0, length, chunk):
        stop = min(start + chunk, length)
        k = stop - start
        dt = delta[:, :, start:stop]  # [m, c, k]
        log_decay = np.cumsum(dt[:, :, None, :] * A[None, :, :, None], axis=-1)  # [m, c, n, k]
        inputs = dt[:, :, None, :] * B[:, None, :, start:stop] * u[:, :, None, start:stop]
        diff = log_decay[..., :, None] - log_decay[..., None, :]  # [m, c, n, t, s]
        causal = np.tril(np.ones((k, k), dtype=bool))
        weights = np.where(causal, np.exp(np.where(causal, diff, 0.0)), 0.0)
        states = np.einsum("mcnts,mcns->mcnt", weights, inputs) + np.exp(log_decay) * h[..., None]
        y[:, :, start:stop] = np.einsum("mcnt,mnt->mct", states, C[:, :, start:stop]) + D[None, :, None] * u[
            :, :, start:stop
        ]
        h = states[..., -1]
    return y


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable sequential selective scan."""
    u, delta, A, B, C, D = (as_tensor(t) for t in (u, delta, A, B, C, D))
    m, c, n, length = _check(u.data, delta.data, A.data, B.data, C.data, D.data)

    # time-major working arrays
    dt = np.moveaxis(delta.data, -1, 0)  # [L, m, c]
    ut = np.moveaxis(u.data, -1, 0)  # [L, m, c]
    bt = np.moveaxis(B.data, -1, 0)  # [L, m, n]
    ct = np.moveaxis(C.data, -1, 0)  # [L, m, n]
    decay = np.exp(dt[..., None] * A.data)  # [L, m, c, n]
    drive = (dt * ut)[..., None] * bt[:, :, None, :]  # [L, m, c, n]
    hs = np.empty((length, m, c, n))
    h = np.zeros((m, c, n))
    for t in range(length):
        h = decay[t] * h + drive[t]
        hs[t] = h
    yt = np.einsum("lmcn,lmn->lmc", hs, ct) + D.data * ut
    record_flops("selective_scan", scan_flops(m, c, n, length))
    out = np.ascontiguousarray(np.moveaxis(yt, 0, -1))

    def backward(g):
        gt = np.moveaxis(g, -1, 0)  # [L, m, c]
        gh_out = gt[..., None] * ct[:, :, None, :]  # dL/dh_t from the readout
        gh = np.empty_like(hs)
        carry = np.zeros((m, c, n))
        for t in range(length - 1, -1, -1):
            carry = gh_out[t] + carry
            gh[t] = carry
            carry = carry * decay[t]
        h_prev = np.concatenate([np.zeros((1, m, c, n)), hs[:-1]], axis=0)
        g_logdecay = gh * h_prev * decay  # dL/d(delta*A)
        g_drive = gh
        g_delta = np.einsum("lmcn,cn->lmc", g_logdecay, A.data) + np.einsum("lmcn,lmn->lmc", g_drive, bt) * ut
        g_A = np.einsum("lmcn,lmc->cn", g_logdecay, dt)
        g_B = np.einsum("lmcn,lmc->lmn", g_drive, dt * ut)
        g_u = np.einsum("lmcn,lmn->lmc", g_drive, bt) * dt + D.data * gt
        g_C = np.einsum("lmc,lmcn->lmn", gt, hs)
        g_D = (gt * ut).sum(axis=(0, 1))
        back = lambda a: np.ascontiguousarray(np.moveaxis(a, 0, -1))  # noqa: E731
        return back(g_u), back(g_delta), g_A, back(g_B), back(g_C), g_D

    return make_result(out, (u, delta, A, B, C, D), backward, "selective_scan")
