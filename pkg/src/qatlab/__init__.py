"""Desk-scale mixed-precision quantization-aware training.

Train small dense/conv networks with per-layer quantized weights, push
low-bit slices toward zero with an L1 penalty on the slice residual, and
drop layer precision on a schedule guided by Hutchinson curvature
estimates. Deterministic end to end: same seed, same bits, same bytes.
"""

from .data import DatasetHandle, load_mnist_idx, synthetic_dataset
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    InputError,
    InternalError,
    QatlabError,
    StateError,
)
from .model import LayerSpec, Model, ModelSpec, build_model
from .numerics import RngStream, gemm, rademacher
from .quantize import (
    LayerQuantState,
    LsbSlice,
    QuantizerKind,
    dequantize,
    lsb_code,
    lsb_residual,
    normalize,
    quant_code,
    quantize_activation,
    quantized_forward,
    round_half_away,
)
from .regularize import RegularizerConfig, lsb_l1, lsb_l1_grad, total_objective
from .report import load_checkpoint, load_report, save_checkpoint, save_report
from .schedule import (
    BitScheme,
    PruneEvent,
    ScheduleConfig,
    ScheduleState,
    lsb_nonzero_rate,
    pruning_event,
    scheme_from_states,
    should_fire,
    size_fraction,
)
from .sensitivity import (
    SensitivityRecord,
    assign_prune_speed,
    hutchinson_trace,
    hvp,
    omega,
)
from .train import (
    TrainConfig,
    TrainResult,
    evaluate,
    lr_at,
    param_accounting,
    train_run,
)

__version__ = "0.1.0"

__all__ = [
    "BitScheme",
    "ConfigError",
    "DataError",
    "DatasetHandle",
    "DivergenceError",
    "InputError",
    "InternalError",
    "LayerQuantState",
    "LayerSpec",
    "LsbSlice",
    "Model",
    "ModelSpec",
    "PruneEvent",
    "QatlabError",
    "QuantizerKind",
    "RegularizerConfig",
    "RngStream",
    "ScheduleConfig",
    "ScheduleState",
    "SensitivityRecord",
    "StateError",
    "TrainConfig",
    "TrainResult",
    "assign_prune_speed",
    "build_model",
    "dequantize",
    "evaluate",
    "gemm",
    "hutchinson_trace",
    "hvp",
    "load_checkpoint",
    "load_mnist_idx",
    "load_report",
    "lr_at",
    "lsb_code",
    "lsb_l1",
    "lsb_l1_grad",
    "lsb_nonzero_rate",
    "lsb_residual",
    "normalize",
    "omega",
    "param_accounting",
    "pruning_event",
    "quant_code",
    "quantize_activation",
    "quantized_forward",
    "rademacher",
    "round_half_away",
    "save_checkpoint",
    "save_report",
    "scheme_from_states",
    "should_fire",
    "size_fraction",
    "synthetic_dataset",
    "total_objective",
    "train_run",
]
