"""Run artifacts: metrics CSV, JSON run report, binary checkpoints, and
delimited diagnostic tables.

Everything is written atomically (temp file + rename) so a crashed run
never leaves a half-written artifact. The metrics CSV column order is
frozen; report JSON round-trips through load_report to an equal dict.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import DataError, InputError
from .model import (
    KIND_CONV3X3,
    KIND_DENSE,
    Conv3x3Layer,
    DenseLayer,
    FlattenLayer,
    LayerSpec,
    Model,
    ModelSpec,
    ReluLayer,
)
from .quantize import (
    LayerQuantState,
    QuantizerKind,
    dequantize,
    lsb_code,
    lsb_residual,
    quant_code,
)
from .train import TrainResult

CHECKPOINT_MAGIC = b"QATCKPT\x00"
CHECKPOINT_VERSION = 1

METRIC_BASE_COLUMNS = ("epoch", "train_loss", "reg_loss", "val_acc", "gamma")


def atomic_write_bytes(path: str | Path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def metrics_columns(num_quantized: int) -> list[str]:
    return list(METRIC_BASE_COLUMNS) + [f"bits_l{i}" for i in range(num_quantized)]


def write_metrics_csv(path: str | Path, metrics: list) -> list[str]:
    """Per-epoch metrics as a delimited table with a frozen header:
    epoch,train_loss,reg_loss,val_acc,gamma,bits_l0,...  Returns the
    column list actually written."""
    if not metrics:
        raise InputError("no metrics to write")
    cols = metrics_columns(len(metrics[0].bits))
    lines = [",".join(cols)]
    for m in metrics:
        row = [_fmt(m.epoch), _fmt(m.train_loss), _fmt(m.reg_loss),
               _fmt(m.val_acc), _fmt(m.gamma)]
        row.extend(_fmt(b) for b in m.bits)
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return cols


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    return obj


def build_run_report(config_echo: dict, result: TrainResult) -> dict:
    """Assemble the run report: echoed config, per-epoch metrics, final
    bit scheme, the pruning event log with sensitivity snapshots, weight
    histograms, and wall-clock timings. The report alone carries enough
    data to re-plot every figure."""
    scheme = result.scheme
    report = {
        "config": _jsonify(config_echo),
        "metrics": [_jsonify(asdict(m)) for m in result.metrics],
        "final_scheme": {
            "layers": [
                {"layer": i, "bits": b, "weights": c}
                for i, b, c in scheme.entries
            ],
            "size_fraction": scheme.size_fraction,
            "compression_ratio": scheme.compression_ratio,
        },
        "events": [_jsonify(asdict(e)) for e in result.events],
        "event_snapshots": [
            {
                "epoch": s.epoch,
                "beta": _jsonify(s.beta),
                "records": None if s.records is None else [
                    _jsonify(asdict(r)) for r in s.records
                ],
                "bits_before": _jsonify(s.bits_before),
                "bits_after": _jsonify(s.bits_after),
                "speeds_before": _jsonify(s.speeds_before),
                "speeds_after": _jsonify(s.speeds_after),
            }
            for s in result.snapshots
        ],
        "initial_beta": _jsonify(result.initial_beta),
        "weight_histograms": [
            {
                "layer": h["layer"],
                "bits": h["bits"],
                "edges": _jsonify(h["edges"]),
                "counts": _jsonify(h["counts"]),
            }
            for h in weight_histograms(result.model)
        ],
        "phase": result.schedule_state.phase,
        "finetune_epoch": result.schedule_state.finetune_epoch,
        "deadline": result.deadline,
        "final_val_acc": result.final_val_acc,
        "timings": {
            "train_seconds": result.train_seconds,
            "event_seconds": result.event_seconds,
        },
    }
    return _jsonify(report)


def save_report(report: dict, path: str | Path):
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")


def load_report(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def save_checkpoint(model: Model, path: str | Path, a_bits: int | None = None,
                    act_clip: float = 1.0, extra: dict | None = None):
    """Binary model container: 8-byte magic, u32 version, u64 JSON
    metadata length, metadata, then each layer's weights and bias as
    little-endian float64 in row-major order."""
    layer_meta = []
    blobs = []
    for layer in model.parametric_layers():
        q = layer.qstate
        meta = {
            "kind": layer.kind,
            "weight_shape": list(layer.weights.shape),
            "bias_shape": list(layer.bias.shape),
            "quantized": q is not None,
        }
        if layer.kind == KIND_CONV3X3:
            meta["in_channels"] = layer.in_channels
        if q is not None:
            meta.update(
                bits=q.bits, prune_speed=q.prune_speed, scale=q.scale,
                quantizer=q.kind.value, floor_bits=q.floor_bits,
            )
        layer_meta.append(meta)
        blobs.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        blobs.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())

    meta = {
        "spec": {
            "input_shape": list(model.spec.input_shape),
            "layers": [{"kind": s.kind, "out": s.out} for s in model.spec.layers],
            "quantized": model.spec.quantized,
            "quantizer": model.spec.quantizer.value,
            "first_last": model.spec.first_last,
        },
        "layers": layer_meta,
        "a_bits": a_bits,
        "act_clip": act_clip,
    }
    if extra:
        meta["extra"] = _jsonify(extra)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<Q", len(meta_bytes)), meta_bytes]
    parts.extend(blobs)
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    """Rebuild a model from a checkpoint; returns (model, metadata)."""
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise DataError(f"truncated checkpoint {path}")
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic in {path}")
    version = struct.unpack_from("<I", raw, 8)[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version} in {path}")
    meta_len = struct.unpack_from("<Q", raw, 12)[0]
    if len(raw) < 20 + meta_len:
        raise DataError(f"truncated checkpoint metadata in {path}")
    meta = json.loads(raw[20:20 + meta_len].decode("utf-8"))

    spec = ModelSpec(
        input_shape=tuple(meta["spec"]["input_shape"]),
        layers=[LayerSpec(kind=s["kind"], out=s["out"]) for s in meta["spec"]["layers"]],
        quantized=meta["spec"]["quantized"],
        quantizer=QuantizerKind(meta["spec"]["quantizer"]),
        first_last=meta["spec"]["first_last"],
    )
    offset = 20 + meta_len
    layers: list = []
    li = iter(meta["layers"])
    for ls in spec.layers:
        if ls.kind in (KIND_DENSE, KIND_CONV3X3):
            lm = next(li)
            w_shape = tuple(lm["weight_shape"])
            b_shape = tuple(lm["bias_shape"])
            w_n = int(np.prod(w_shape))
            b_n = int(np.prod(b_shape))
            need = (w_n + b_n) * 8
            if len(raw) < offset + need:
                raise DataError(f"truncated checkpoint tensor data in {path}")
            w = np.frombuffer(raw, dtype="<f8", count=w_n, offset=offset)
            w = w.reshape(w_shape).copy()
            offset += w_n * 8
            b = np.frombuffer(raw, dtype="<f8", count=b_n, offset=offset)
            b = b.reshape(b_shape).copy()
            offset += b_n * 8
            q = None
            if lm["quantized"]:
                q = LayerQuantState(
                    latent=w, bits=lm["bits"], prune_speed=lm["prune_speed"],
                    scale=lm["scale"], kind=QuantizerKind(lm["quantizer"]),
                    floor_bits=lm["floor_bits"],
                )
            if ls.kind == KIND_DENSE:
                layers.append(DenseLayer(w, b, q))
            else:
                layers.append(Conv3x3Layer(w, b, q, in_channels=lm["in_channels"]))
        elif ls.kind == "relu":
            layers.append(ReluLayer())
        else:
            layers.append(FlattenLayer())
    if offset != len(raw):
        raise DataError(f"checkpoint has {len(raw) - offset} trailing bytes: {path}")
    return Model(spec, layers), meta


def emit_quantizer_table(path: str | Path, bits: int, slice_bits: int,
                         kind: QuantizerKind, points: int = 33) -> list[str]:
    """Delimited sweep of the quantizer over [0, 1]: full code, coarse
    code, LSB slice code, and the continuous LSB residual (residual is
    only defined for the midpoint-aligned quantizer; the other kind gets
    the raw distance to its coarse reconstruction)."""
    if points < 2:
        raise InputError(f"need at least 2 sweep points, got {points}")
    u = np.linspace(0.0, 1.0, points)
    full = quant_code(u, bits, kind)
    coarse = quant_code(u, bits - slice_bits, kind)
    lsb = lsb_code(u, bits, slice_bits, kind)
    if kind == QuantizerKind.ROUND_CLAMP:
        resid = lsb_residual(u, bits, slice_bits)
    else:
        resid = u - dequantize(coarse, bits - slice_bits)
    lines = ["u,full_code,coarse_code,lsb_code,residual"]
    for i in range(points):
        lines.append(
            f"{_fmt(u[i])},{int(full[i])},{int(coarse[i])},{int(lsb[i])},{_fmt(resid[i])}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
    return lines


def emit_scheme_csv(path: str | Path, scheme):
    lines = ["layer,bits,weights"]
    for i, b, c in scheme.entries:
        lines.append(f"{i},{b},{c}")
    lines.append(f"# size_fraction {_fmt(scheme.size_fraction)}")
    lines.append(f"# compression_ratio {_fmt(scheme.compression_ratio)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def emit_sensitivity_csv(path: str | Path, records):
    lines = ["layer,trace,gap_sq,omega"]
    for r in records:
        lines.append(f"{r.layer},{_fmt(r.trace)},{_fmt(r.gap_sq)},{_fmt(r.omega)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def weight_histograms(model: Model, bins: int = 64) -> list[dict]:
    """Histogram of each quantized layer's normalized weights over
    [0, 1]; returns one dict per layer with bin edges and counts."""
    out = []
    for i, layer in enumerate(model.parametric_layers()):
        if layer.qstate is None:
            continue
        u = layer.qstate.normalized().ravel()
        counts, edges = np.histogram(u, bins=bins, range=(0.0, 1.0))
        out.append({"layer": i, "bits": layer.qstate.bits,
                    "edges": edges, "counts": counts})
    return out


def emit_weight_histogram_csv(path: str | Path, model: Model, bins: int = 64):
    lines = ["layer,bin_left,bin_right,count"]
    for h in weight_histograms(model, bins):
        edges, counts = h["edges"], h["counts"]
        for j in range(len(counts)):
            lines.append(
                f"{h['layer']},{_fmt(edges[j])},{_fmt(edges[j + 1])},{int(counts[j])}"
            )
    atomic_write_text(path, "\n".join(lines) + "\n")
