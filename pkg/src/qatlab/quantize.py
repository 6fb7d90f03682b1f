"""Integer code mapping, LSB slicing, and the STE forward contract.

Two uniform quantizers over the normalized weight range [0, 1]:

* ``ROUND_CLAMP``: code = min(round(2^m * u), 2^m - 1). Scaling by 2^m
  (rather than 2^m - 1) places every coarse bin boundary at the midpoint
  of a fine bin, so an m-bit code splits exactly into its (m-k)-bit top
  part and a small signed k-bit remainder.
* ``DOREFA``: code = round((2^m - 1) * u), the classic linear quantizer.
  Its coarse/fine boundaries are misaligned, which is what makes its LSB
  slices overflow the k-bit range (see ``lsb_code``).

Rounding is half-away-from-zero everywhere; dequantized values live on
the c / (2^m - 1) grid for both quantizers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, InputError, InternalError

MAX_BITS = 8


class QuantizerKind(Enum):
    ROUND_CLAMP = "roundclamp"
    DOREFA = "dorefa"


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (np.round ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    f = np.floor(np.abs(x))
    r = np.abs(x) - f
    mag = f + (r >= 0.5)
    return np.sign(x) * mag


def _check_bits(m: int, name: str = "bits") -> int:
    m = int(m)
    if not 1 <= m <= MAX_BITS:
        raise ConfigError(f"{name} must be in [1, {MAX_BITS}], got {m}")
    return m


def normalize(latent: np.ndarray, scale: float) -> np.ndarray:
    """Affine map from latent weight units onto [0, 1], clamped.

    latent = -scale maps to 0, 0 maps to 0.5, +scale maps to 1; anything
    outside [-scale, scale] saturates.
    """
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    return np.clip(np.asarray(latent, dtype=np.float64) / (2.0 * scale) + 0.5, 0.0, 1.0)


def denormalize(u: np.ndarray, scale: float) -> np.ndarray:
    """Inverse of :func:`normalize` on the unclamped region."""
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    return 2.0 * scale * (np.asarray(u, dtype=np.float64) - 0.5)


def clamp_mask(latent: np.ndarray, scale: float) -> np.ndarray:
    """True where :func:`normalize` does NOT saturate (gradient passes through)."""
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    v = np.asarray(latent, dtype=np.float64) / (2.0 * scale) + 0.5
    return (v >= 0.0) & (v <= 1.0)


def quant_code(u: np.ndarray, m: int, kind: QuantizerKind) -> np.ndarray:
    """Integer code of a normalized weight under an m-bit quantizer."""
    m = _check_bits(m)
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise InputError("normalized weights must lie in [0, 1]")
    if kind is QuantizerKind.ROUND_CLAMP:
        code = np.minimum(round_half_away(u * (1 << m)), (1 << m) - 1)
    elif kind is QuantizerKind.DOREFA:
        code = round_half_away(u * ((1 << m) - 1))
    else:  # pragma: no cover - enum is closed
        raise ConfigError(f"unknown quantizer kind {kind!r}")
    return code.astype(np.int64)


def dequantize(code: np.ndarray, m: int) -> np.ndarray:
    """Map an m-bit integer code back to [0, 1] on the c/(2^m - 1) grid."""
    m = _check_bits(m)
    code = np.asarray(code, dtype=np.int64)
    if np.any(code < 0) or np.any(code > (1 << m) - 1):
        raise InternalError(f"code out of range for {m}-bit grid")
    return code.astype(np.float64) / ((1 << m) - 1)


def _check_slice(n: int, k: int) -> tuple[int, int]:
    n = _check_bits(n, "n")
    k = int(k)
    if not 1 <= k < n:
        raise ConfigError(f"slice width k must satisfy 1 <= k < n, got k={k}, n={n}")
    return n, k


def lsb_code(u: np.ndarray, n: int, k: int, kind: QuantizerKind) -> np.ndarray:
    """Value of the k least significant bits of the n-bit code.

    Defined as code_n - 2^k * code_{n-k}, i.e. what remains after the top
    (n-k) bits are shifted out. Under ROUND_CLAMP this is a signed value
    in [-2^(k-1), 2^(k-1)] wherever the fine code is below its ceiling;
    at the saturated top code 2^n - 1 the slice reaches 2^k - 1, which for
    k = 1 coincides with the bound but for k >= 2 overflows it. Under
    DOREFA the slice escapes the k-bit range over wide interior regions
    because the coarse bins do not nest inside the fine ones at all.
    """
    n, k = _check_slice(n, k)
    return quant_code(u, n, kind) - (1 << k) * quant_code(u, n - k, kind)


def lsb_residual(u: np.ndarray, n: int, k: int) -> np.ndarray:
    """Continuous distance from u to its nearest (n-k)-bit rounding target.

    r = u - code_{n-k}(u) / 2^(n-k), piecewise linear with slope 1 and
    zero exactly where the integer LSB code is zero. ROUND_CLAMP only:
    the DoReFa quantizer has no centered residual (its pull is one-sided).
    """
    n, k = _check_slice(n, k)
    coarse = quant_code(u, n - k, QuantizerKind.ROUND_CLAMP)
    return np.asarray(u, dtype=np.float64) - coarse.astype(np.float64) / (1 << (n - k))


def lsb_residual_kind(u: np.ndarray, n: int, k: int, kind: QuantizerKind) -> np.ndarray:
    """Residual dispatch used by the table emitters; rejects DoReFa."""
    if kind is not QuantizerKind.ROUND_CLAMP:
        raise ConfigError("lsb_residual is defined for the RoundClamp quantizer only")
    return lsb_residual(u, n, k)


@dataclass
class LsbSlice:
    """Integer LSB codes and continuous residuals of one layer, slice width k."""

    codes: np.ndarray
    residuals: np.ndarray
    k: int


@dataclass
class LayerQuantState:
    """Quantization state of one parametric layer.

    ``latent`` holds the unconstrained real weights that the optimizer
    updates; ``scale`` is frozen at initialization and never trained.
    ``bits`` only ever decreases (by ``prune_speed`` per pruning event)
    and never drops below ``floor_bits``.
    """

    latent: np.ndarray
    bits: int
    prune_speed: int = 1
    scale: float = 1.0
    kind: QuantizerKind = QuantizerKind.ROUND_CLAMP
    floor_bits: int = 1

    def __post_init__(self):
        self.latent = np.asarray(self.latent, dtype=np.float64)
        self.validate()

    def validate(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise ConfigError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        if self.prune_speed not in (1, 2):
            raise ConfigError(f"prune_speed must be 1 or 2, got {self.prune_speed}")
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if not 1 <= self.floor_bits <= MAX_BITS:
            raise ConfigError(f"floor_bits must be in [1, {MAX_BITS}]")

    def normalized(self) -> np.ndarray:
        return normalize(self.latent, self.scale)

    def lsb_slice(self) -> LsbSlice:
        """Current LSB slice at width k = prune_speed (RoundClamp codes)."""
        u = self.normalized()
        k = self.prune_speed
        codes = lsb_code(u, self.bits, k, QuantizerKind.ROUND_CLAMP)
        residuals = lsb_residual(u, self.bits, k)
        return LsbSlice(codes=codes, residuals=residuals, k=k)


def quantized_forward(state: LayerQuantState) -> np.ndarray:
    """Weights as seen by the forward pass: quantize in [0,1], map back.

    Backward contract (straight-through): the loss gradient w.r.t. the
    latent weights equals the gradient w.r.t. the returned array wherever
    :func:`normalize` did not clamp, and is zero where it did. Use
    :func:`clamp_mask` to apply it.
    """
    u = state.normalized()
    code = quant_code(u, state.bits, state.kind)
    return denormalize(dequantize(code, state.bits), state.scale)


def ste_mask(state: LayerQuantState) -> np.ndarray:
    """Pass-through mask for the STE backward of :func:`quantized_forward`."""
    return clamp_mask(state.latent, state.scale)


def quantize_activation(
    x: np.ndarray,
    a_bits: int | None,
    clip: float = 1.0,
    return_mask: bool = False,
):
    """Uniform activation quantization on [0, clip]; identity when a_bits is None.

    The STE passes gradients through where 0 <= x <= clip and blocks them
    outside. ``return_mask=True`` also returns that pass-through mask.
    """
    x = np.asarray(x, dtype=np.float64)
    if a_bits is None:
        return (x, np.ones_like(x, dtype=bool)) if return_mask else x
    a_bits = _check_bits(a_bits, "a_bits")
    if clip <= 0:
        raise ConfigError(f"activation clip must be positive, got {clip}")
    levels = (1 << a_bits) - 1
    clamped = np.clip(x, 0.0, clip)
    out = clip * round_half_away(clamped * (levels / clip)) / levels
    if return_mask:
        return out, (x >= 0.0) & (x <= clip)
    return out
