"""Dense numeric primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` values (row-major, float32 or float64).
Every differentiable op comes as a pair: ``op(...) -> (out, cache)`` and
``op_backward(dout, cache) -> grads``. There is no graph; callers thread
caches through their own backward code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, InvalidExampleError

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class Parameter:
    """A named trainable array plus its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def accumulate(self, g):
        if g.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {g.shape} != {self.value.shape}")
        self.grad += g


# ---------------------------------------------------------------------------
# elementwise helpers (no caches needed; backward formulas are one-liners)


def softplus(x):
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1 + x * (1 - s))


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """``a @ b`` over the last two axes, with a shape check that names both operands."""
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def matmul_backward(dout, cache):
    a, b = cache
    if b.ndim == 2 and a.ndim > 2:
        # a: (..., m, k) against a shared weight; fold the batch axes into rows
        a2 = a.reshape(-1, a.shape[-1])
        d2 = dout.reshape(-1, dout.shape[-1])
        return dout @ b.T, a2.T @ d2
    return dout @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ dout


# ---------------------------------------------------------------------------
# rmsnorm


def rmsnorm(x, gain, eps):
    if x.shape[-1] != gain.shape[-1]:
        raise DimensionError(f"rmsnorm: last dim {x.shape[-1]} != gain {gain.shape}")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps) if eps > 0 else _safe_inv_sqrt(ms)
    xhat = x * inv
    return xhat * gain, (xhat, inv, gain)


def _safe_inv_sqrt(ms):
    out = np.zeros_like(ms)
    nz = ms > 0
    out[nz] = 1.0 / np.sqrt(ms[nz])
    return out


def rmsnorm_backward(dout, cache):
    xhat, inv, gain = cache
    dgain = (dout * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dout * gain
    d = xhat.shape[-1]
    dx = inv * (dxhat - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True) / d)
    return dx, dgain


# ---------------------------------------------------------------------------
# cross entropy


def cross_entropy(logits, targets, mask):
    """Masked next-token loss.

    ``logits`` is ``(..., T, V)``; ``targets`` and ``mask`` are ``(..., T)``.
    Each sequence contributes the mean over its masked positions, and the
    result is the mean over sequences (a plain ``T x V`` input is one sequence).
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise DimensionError(f"cross_entropy shapes: {logits.shape}, {targets.shape}, {mask.shape}")
    V = logits.shape[-1]
    if targets.size and (targets[mask].min(initial=0) < 0 or targets[mask].max(initial=0) >= V):
        raise InvalidExampleError("target id outside vocabulary")
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise InvalidExampleError("loss mask selects no positions")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, targets[..., None].clip(0, V - 1), axis=-1)[..., 0]
    nll = (logz - picked) * mask
    per_seq = nll.sum(axis=-1) / counts
    loss = float(per_seq.mean())
    return loss, (shifted, logz, targets, mask, counts)


def cross_entropy_backward(cache, dloss=1.0):
    shifted, logz, targets, mask, counts = cache
    probs = np.exp(shifted - logz[..., None])
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, targets[..., None].clip(0, probs.shape[-1] - 1), 1.0, axis=-1)
    n_seq = counts.size if counts.ndim else 1
    weight = (mask / np.expand_dims(counts, -1)) * (dloss / n_seq)
    return (probs - onehot) * weight[..., None].astype(probs.dtype)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], float],
    arrays: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    n_coords: int | None = 30,
    h: float = 1e-5,
    floor: float = 1e-7,
    seed: int = 0,
) -> float:
    """Max relative error between analytic ``grads`` and central differences of ``f``.

    ``f`` closes over ``arrays``; each sampled coordinate is perturbed in place
    and restored. ``n_coords`` coordinates are sampled per array (``None`` = all).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for arr, g in zip(arrays, grads):
        if arr.dtype != np.float64 or not arr.flags.c_contiguous:
            raise DimensionError("grad_check needs contiguous double precision arrays")
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if n_coords is not None and flat.size > n_coords:
            idx = rng.choice(flat.size, size=n_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = float(gflat[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
