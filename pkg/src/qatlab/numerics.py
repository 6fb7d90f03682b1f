"""Deterministic dense math and seeded randomness for the training engine.

Everything here is pure and reproducible. Floating-point results are
bit-identical across runs because every reduction has a fixed accumulation
order, and random draws are bit-identical across runs *and platforms*
because they come from a counter-based generator (Philox-4x64) keyed by an
explicit (seed, stream id) pair.

Stream ids partition the consumers of randomness so that adding draws in
one consumer never shifts the sequence seen by another.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from numba import njit

from .errors import InputError

# Stream id assignments. Hutchinson probes get a block of ids above the
# base so every (pruning event, layer) pair owns its own stream.
STREAM_WEIGHTS = 0
STREAM_SHUFFLE = 1
STREAM_DATA = 2
STREAM_HESSIAN_BATCH = 3
STREAM_HUTCHINSON_BASE = 1 << 32


class RngStream:
    """Counter-based PRNG stream: Philox-4x64 keyed by (seed, stream id).

    Identical (seed, stream) pairs produce identical sequences on every
    platform; distinct stream ids are statistically independent.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def standard_normal(self, size) -> np.ndarray:
        return self.gen.standard_normal(size)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def rademacher(rng: RngStream, n: int) -> np.ndarray:
    """Vector of n independent +/-1 entries, deterministic per stream."""
    if n < 1:
        raise InputError(f"rademacher needs n >= 1, got {n}")
    return rng.integers(0, 2, n).astype(np.float64) * 2.0 - 1.0


@njit(cache=True)
def _gemm_kernel(a, b, out):  # pragma: no cover - exercised via gemm()
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    Each output element accumulates its k products in ascending-k order,
    so the result is bit-identical to a naive triple loop (no FMA, no
    blocking, no reordering) regardless of array layout or thread count.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise InputError(f"gemm needs 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise InputError(f"gemm dimension mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    _gemm_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
    return out


def cross_entropy_with_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    grad = (softmax - onehot) / batch. Computed via the shifted
    log-sum-exp so saturated logits stay finite.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise InputError(f"logits must be batch x classes, got shape {logits.shape}")
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise InputError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(
            f"labels must lie in [0, {classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_softmax = shifted - np.log(denom)
    loss = -log_softmax[np.arange(batch), labels].mean()
    grad = exp / denom
    grad[np.arange(batch), labels] -= 1.0
    grad /= batch
    return float(loss), grad


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], w: np.ndarray, eps: float
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise InputError(f"eps must be positive, got {eps}")
    w = np.asarray(w, dtype=np.float64)
    grad = np.zeros_like(w)
    flat = grad.reshape(-1)
    work = w.copy()
    wflat = work.reshape(-1)
    for i in range(wflat.size):
        orig = wflat[i]
        wflat[i] = orig + eps
        fp = f(work)
        wflat[i] = orig - eps
        fm = f(work)
        wflat[i] = orig
        flat[i] = (fp - fm) / (2.0 * eps)
    return grad
