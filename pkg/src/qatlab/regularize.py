"""L1 penalty on LSB residuals and total-objective assembly.

The penalty sums |residual| over every quantized layer, where the
residual is the continuous distance from each normalized weight to its
nearest coarse rounding target (slice width = the layer's prune speed).
Its subgradient is sign(residual), which pulls each weight toward the
closest value representable at the lower precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantize import LayerQuantState, clamp_mask, lsb_residual


@dataclass
class RegularizerConfig:
    lam: float = 0.0
    active: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"regularization strength must be >= 0, got {self.lam}")


def _sliceable(state: LayerQuantState) -> bool:
    # Layers at (or too close to) the precision floor contribute nothing.
    return state.bits > state.prune_speed


def layer_residuals(state: LayerQuantState) -> np.ndarray:
    return lsb_residual(state.normalized(), state.bits, state.prune_speed)


def lsb_l1(layers: list[LayerQuantState]) -> float:
    """Sum of |LSB residual| over all sliceable layers (fixed layer order)."""
    total = 0.0
    for state in layers:
        if _sliceable(state):
            total += float(np.abs(layer_residuals(state)).sum())
    return total


def lsb_l1_grad(state: LayerQuantState) -> np.ndarray:
    """Subgradient of :func:`lsb_l1` w.r.t. this layer's latent weights.

    sign(residual) routed through the same clamp-aware chain as the task
    loss: the normalize map contributes a factor 1/(2*scale) inside the
    clamp and zero outside; sign(0) = 0 so converged weights stay put.
    """
    if not _sliceable(state):
        return np.zeros_like(state.latent)
    grad = np.sign(layer_residuals(state)) / (2.0 * state.scale)
    grad[~clamp_mask(state.latent, state.scale)] = 0.0
    return grad


def total_objective(task_loss: float, reg: float, cfg: RegularizerConfig) -> float:
    """task_loss + lambda * reg while the regularizer is active, else task_loss."""
    if cfg.active and cfg.lam > 0:
        return task_loss + cfg.lam * reg
    return task_loss
