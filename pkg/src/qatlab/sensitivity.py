"""Layer sensitivity scoring: Hessian-vector products, Hutchinson trace
estimation, and the trace * quantization-gap score that drives prune-speed
assignment.

The engine has first-order gradients only, so Hessian-vector products are
formed by central differences of the gradient; this is exact on quadratics
and adequate at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InputError, InternalError
from .numerics import RngStream, rademacher

GradFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class SensitivityRecord:
    """Per-layer sensitivity snapshot taken at one pruning event."""

    layer: int
    trace: float
    gap_sq: float
    omega: float


def hvp(grad_fn: GradFn, w: np.ndarray, v: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Hessian-vector product via central differences of the gradient.

    Step h = eps / max|v| keeps the perturbation magnitude at eps per
    coordinate. The caller's w is never modified.
    """
    if eps <= 0:
        raise InputError(f"eps must be positive, got {eps}")
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    vmax = np.abs(v).max() if v.size else 0.0
    if vmax == 0.0:
        raise InputError("probe vector must be nonzero")
    h = eps / vmax
    gp = grad_fn(w + h * v)
    gm = grad_fn(w - h * v)
    return (np.asarray(gp, dtype=np.float64) - np.asarray(gm, dtype=np.float64)) / (2.0 * h)


def hutchinson_trace(
    grad_fn: GradFn,
    w: np.ndarray,
    samples: int,
    rng: RngStream,
    eps: float = 1e-3,
) -> float:
    """Trace estimate (1/m) * sum v^T H v over Rademacher probes v.

    Exact per-sample on diagonal Hessians since v^T diag(d) v = sum(d)
    for any +/-1 vector. Probes and the summation order are fixed by the
    stream, so the estimate is reproducible.
    """
    if samples < 1:
        raise InputError(f"samples must be >= 1, got {samples}")
    w = np.asarray(w, dtype=np.float64)
    total = 0.0
    for _ in range(samples):
        v = rademacher(rng, w.size).reshape(w.shape)
        total += float((v * hvp(grad_fn, w, v, eps)).sum())
    return total / samples


def omega(trace: float, latent: np.ndarray, quantized: np.ndarray) -> float:
    """Sensitivity score: max(trace, 0) * squared quantization gap.

    Negative trace estimates are sampling noise and clamp to zero rather
    than marking a layer as maximally insensitive.
    """
    latent = np.asarray(latent, dtype=np.float64)
    quantized = np.asarray(quantized, dtype=np.float64)
    if latent.shape != quantized.shape:
        raise InternalError(
            f"omega shape mismatch: latent {latent.shape} vs quantized {quantized.shape}"
        )
    gap_sq = float(((quantized - latent) ** 2).sum())
    return max(float(trace), 0.0) * gap_sq


def assign_prune_speed(omegas: list[float]) -> list[int]:
    """2 bits per event for layers strictly below the mean score, else 1."""
    if len(omegas) == 0:
        raise InputError("assign_prune_speed needs at least one layer score")
    mean = float(np.mean(omegas))
    return [2 if o < mean else 1 for o in omegas]
