"""Small feedforward models (dense / 3x3 conv) with quantized weights.

Everything runs on the deterministic gemm kernel so two runs with the
same seed produce bit-identical weights. Convolutions are im2col plus
gemm; kernels are stored directly in their im2col layout (rows ordered
kernel-row, kernel-col, in-channel). Backward applies the straight-through
rule: latent weight gradients equal effective weight gradients wherever
the normalized latent was not clamped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .numerics import STREAM_WEIGHTS, RngStream, gemm
from .quantize import (
    LayerQuantState,
    QuantizerKind,
    quantize_activation,
    quantized_forward,
    ste_mask,
)

KIND_DENSE = "dense"
KIND_CONV3X3 = "conv3x3"
KIND_RELU = "relu"
KIND_FLATTEN = "flatten"

PARAMETRIC_KINDS = (KIND_DENSE, KIND_CONV3X3)

FIRST_LAST_QUANTIZE = "quantize"
FIRST_LAST_PIN8 = "pin8"


@dataclass
class LayerSpec:
    kind: str
    out: int | None = None

    def __post_init__(self):
        if self.kind not in (KIND_DENSE, KIND_CONV3X3, KIND_RELU, KIND_FLATTEN):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAMETRIC_KINDS:
            if self.out is None or self.out < 1:
                raise ConfigError(f"{self.kind} layer needs a positive 'out', got {self.out}")
        elif self.out is not None:
            raise ConfigError(f"{self.kind} layer takes no 'out'")


@dataclass
class ModelSpec:
    """Architecture description.

    input_shape is (features,) for dense inputs or (H, W, C) for images.
    first_last selects the edge-layer policy: "quantize" treats the first
    and last parametric layers like any other, "pin8" floors them at
    8 bits so pruning never touches them.
    """

    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    quantized: bool = True
    quantizer: QuantizerKind = QuantizerKind.ROUND_CLAMP
    first_last: str = FIRST_LAST_QUANTIZE

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) not in (1, 3):
            raise ConfigError(
                f"input_shape must be (features,) or (H, W, C), got {self.input_shape}"
            )
        if any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be positive, got {self.input_shape}")
        if self.first_last not in (FIRST_LAST_QUANTIZE, FIRST_LAST_PIN8):
            raise ConfigError(f"unknown first_last policy {self.first_last!r}")
        if not any(l.kind in PARAMETRIC_KINDS for l in self.layers):
            raise ConfigError("model needs at least one dense or conv3x3 layer")
        if self.layers[-1].kind != KIND_DENSE:
            raise ConfigError("last layer must be dense (produces the logits)")
        self._check_chain()

    def _check_chain(self):
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            if spec.kind == KIND_DENSE:
                if len(shape) != 1:
                    raise ConfigError(
                        f"layer {i}: dense needs flat input, has shape {shape} "
                        "(insert a flatten layer)"
                    )
                shape = (spec.out,)
            elif spec.kind == KIND_CONV3X3:
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: conv3x3 needs (H, W, C) input, has {shape}")
                shape = (shape[0], shape[1], spec.out)
            elif spec.kind == KIND_FLATTEN:
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: flatten needs (H, W, C) input, has {shape}")
                shape = (shape[0] * shape[1] * shape[2],)
        self.output_dim = shape[0] if len(shape) == 1 else None
        if self.output_dim is None:
            raise ConfigError("model output must be flat logits")


class _Parametric:
    """Weight + bias layer. weights has gemm layout (fan_in, fan_out)."""

    kind: str

    def __init__(self, weights: np.ndarray, bias: np.ndarray,
                 qstate: LayerQuantState | None):
        self.weights = weights
        self.bias = bias
        self.qstate = qstate

    def effective_weights(self) -> np.ndarray:
        if self.qstate is None:
            return self.weights
        return quantized_forward(self.qstate)

    def param_count(self) -> int:
        return self.weights.size + self.bias.size


class DenseLayer(_Parametric):
    kind = KIND_DENSE


class Conv3x3Layer(_Parametric):
    kind = KIND_CONV3X3

    def __init__(self, weights, bias, qstate, in_channels: int):
        super().__init__(weights, bias, qstate)
        self.in_channels = in_channels


class ReluLayer:
    kind = KIND_RELU


class FlattenLayer:
    kind = KIND_FLATTEN


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, 9*C) patches of the zero-padded 3x3
    neighborhoods, rows ordered kernel-row, kernel-col, channel."""
    n, h, w, c = x.shape
    padded = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    padded[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki * 3 + kj, :] = padded[:, ki:ki + h, kj:kj + w, :]
    return np.ascontiguousarray(cols.reshape(n * h * w, 9 * c))


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the image."""
    n, h, w, c = shape
    dcols = dcols.reshape(n, h, w, 9, c)
    dpadded = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dpadded[:, ki:ki + h, kj:kj + w, :] += dcols[:, :, :, ki * 3 + kj, :]
    return dpadded[:, 1:-1, 1:-1, :]


class Model:
    def __init__(self, spec: ModelSpec, layers: list):
        self.spec = spec
        self.layers = layers

    def parametric_layers(self) -> list[_Parametric]:
        return [l for l in self.layers if isinstance(l, _Parametric)]

    def quant_states(self) -> list[LayerQuantState]:
        return [l.qstate for l in self.parametric_layers() if l.qstate is not None]

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.parametric_layers())

    def weight_counts(self) -> list[int]:
        return [l.weights.size for l in self.parametric_layers()]

    def forward(
        self,
        x: np.ndarray,
        a_bits: int | None = None,
        act_clip: float = 1.0,
        with_cache: bool = False,
        weight_override: dict[int, np.ndarray] | None = None,
    ):
        """Run the network; returns logits, or (logits, cache) when
        with_cache is set. weight_override maps parametric-layer ordinal
        to a raw effective weight matrix (bypassing that layer's
        quantizer), used for probing the loss as a function of one
        layer's weights."""
        if x.ndim < 2:
            raise InputError(f"batch input must be at least 2-d, got shape {x.shape}")
        n = x.shape[0]
        expected = self.spec.input_shape
        a = x.reshape((n,) + expected) if x.shape[1:] != expected else x
        a = np.ascontiguousarray(a, dtype=np.float64)

        cache = [] if with_cache else None
        overrides = weight_override or {}
        p_idx = 0
        for layer in self.layers:
            if isinstance(layer, _Parametric):
                w_eff = overrides.get(p_idx, None)
                if w_eff is None:
                    w_eff = layer.effective_weights()
                p_idx += 1
                if layer.kind == KIND_DENSE:
                    z = gemm(a, w_eff) + layer.bias
                    if with_cache:
                        cache.append(("dense", a, w_eff))
                    a = z
                else:
                    img_shape = a.shape
                    cols = _im2col(a)
                    z = gemm(cols, w_eff) + layer.bias
                    if with_cache:
                        cache.append(("conv3x3", cols, w_eff, img_shape))
                    a = z.reshape(img_shape[0], img_shape[1], img_shape[2], -1)
            elif isinstance(layer, ReluLayer):
                pos = a > 0
                a = np.where(pos, a, 0.0)
                if a_bits is not None:
                    a, qmask = quantize_activation(a, a_bits, act_clip, return_mask=True)
                else:
                    qmask = None
                if with_cache:
                    cache.append(("relu", pos, qmask))
            else:
                if with_cache:
                    cache.append(("flatten", a.shape))
                a = a.reshape(n, -1)
        if with_cache:
            return a, cache
        return a

    def backward(self, cache: list, dlogits: np.ndarray, ste: bool = True):
        """Walk the cache in reverse; returns (weight grads, bias grads)
        lists indexed by parametric-layer ordinal. With ste=True weight
        grads are masked to the unclamped region of the latent weights;
        ste=False returns raw effective-weight gradients."""
        n_param = len(self.parametric_layers())
        dweights: list = [None] * n_param
        dbiases: list = [None] * n_param
        p_idx = n_param
        da = dlogits
        for entry in reversed(cache):
            tag = entry[0]
            if tag == "dense":
                _, a_in, w_eff = entry
                p_idx -= 1
                dweights[p_idx] = gemm(np.ascontiguousarray(a_in.T), da)
                dbiases[p_idx] = da.sum(axis=0)
                da = gemm(da, np.ascontiguousarray(w_eff.T))
            elif tag == "conv3x3":
                _, cols, w_eff, img_shape = entry
                p_idx -= 1
                dz = da.reshape(-1, da.shape[-1])
                dweights[p_idx] = gemm(np.ascontiguousarray(cols.T), dz)
                dbiases[p_idx] = dz.sum(axis=0)
                dcols = gemm(dz, np.ascontiguousarray(w_eff.T))
                da = _col2im(dcols, img_shape)
            elif tag == "relu":
                _, pos, qmask = entry
                if qmask is not None:
                    da = da * qmask
                da = np.where(pos, da, 0.0)
            else:
                _, shape = entry
                da = da.reshape(shape)
        if ste:
            for i, layer in enumerate(self.parametric_layers()):
                if layer.qstate is not None:
                    dweights[i] = dweights[i] * ste_mask(layer.qstate)
        return dweights, dbiases


def build_model(spec: ModelSpec, seed: int, min_bits: int = 1,
                initial_bits: int = 8) -> Model:
    """Instantiate a model with Kaiming-uniform weights (bound
    sqrt(6 / fan_in)), zero biases, and per-layer quantizer state at
    initial_bits. The normalization scale freezes at max |weight| of the
    init. Weight draws come from the weights RNG stream of the seed, in
    layer order, so equal seeds give bit-identical models."""
    rng = RngStream(seed, STREAM_WEIGHTS)
    param_specs = [s for s in spec.layers if s.kind in PARAMETRIC_KINDS]
    n_param = len(param_specs)

    layers: list = []
    shape = spec.input_shape
    p_idx = 0
    for ls in spec.layers:
        if ls.kind == KIND_DENSE:
            fan_in, fan_out = shape[0], ls.out
            w = _kaiming_uniform(rng, fan_in, fan_out)
            q = _make_qstate(spec, w, p_idx, n_param, min_bits, initial_bits)
            layers.append(DenseLayer(w, np.zeros(fan_out), q))
            shape = (fan_out,)
            p_idx += 1
        elif ls.kind == KIND_CONV3X3:
            cin, cout = shape[2], ls.out
            w = _kaiming_uniform(rng, 9 * cin, cout)
            q = _make_qstate(spec, w, p_idx, n_param, min_bits, initial_bits)
            layers.append(Conv3x3Layer(w, np.zeros(cout), q, in_channels=cin))
            shape = (shape[0], shape[1], cout)
            p_idx += 1
        elif ls.kind == KIND_RELU:
            layers.append(ReluLayer())
        else:
            layers.append(FlattenLayer())
            shape = (shape[0] * shape[1] * shape[2],)
    return Model(spec, layers)


def _kaiming_uniform(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def _make_qstate(spec: ModelSpec, w: np.ndarray, p_idx: int, n_param: int,
                 min_bits: int, initial_bits: int) -> LayerQuantState | None:
    if not spec.quantized:
        return None
    floor = min_bits
    if spec.first_last == FIRST_LAST_PIN8 and p_idx in (0, n_param - 1):
        floor = max(floor, 8)
    scale = float(np.max(np.abs(w)))
    return LayerQuantState(
        latent=w,
        bits=max(initial_bits, floor),
        prune_speed=1,
        scale=scale,
        kind=spec.quantizer,
        floor_bits=floor,
    )
