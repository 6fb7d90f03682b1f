"""Command-line front end.

Subcommands:

- ``train``: run a config end to end, writing report.json, metrics.csv,
  checkpoint.bin, delimited diagnostic tables, and figures.
- ``eval``: score a checkpoint on a config's validation split.
- ``scheme``: print a checkpoint's per-layer bit assignment.
- ``hessian-report``: curvature/sensitivity table for a checkpoint.
- ``accounting``: storage comparison against bit-split schemes, using
  the bundled reference model shape tables.
- ``quantizer-table``: sweep a quantizer pair and dump codes/residuals.

Exit codes: 0 success, 1 config error, 2 data error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .data import (
    GENERATOR_NAMES,
    DatasetHandle,
    dataset_rng,
    load_mnist_idx,
    synthetic_dataset,
)
from .errors import ConfigError, DataError, DivergenceError, InputError
from .model import LayerSpec, Model, ModelSpec, build_model
from .quantize import QuantizerKind
from .report import (
    build_run_report,
    emit_quantizer_table,
    emit_scheme_csv,
    emit_sensitivity_csv,
    emit_weight_histogram_csv,
    load_checkpoint,
    save_checkpoint,
    save_report,
    write_metrics_csv,
)
from .schedule import ScheduleConfig, scheme_from_states
from .train import TrainConfig, evaluate, param_accounting, sensitivity_records, train_run

REFERENCE_SHAPES = ("resnet20", "resnet18", "resnet50")

_DATASET_KEYS = {
    "mnist-idx": {"kind", "images", "labels"},
    "gaussian-blobs": {"kind", "samples", "classes", "features", "margin"},
    "two-spirals": {"kind", "samples", "noise", "turns"},
    "synthetic-digits": {
        "kind", "samples", "max_rotation", "max_shift", "max_shear",
        "scale_low", "scale_high", "noise",
    },
}


def _reject_unknown(section: dict, allowed: set[str], path: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unrecognized config key '{path}.{key}'" if path
                              else f"unrecognized config key '{key}'")


def _require(section: dict, key: str, path: str):
    if key not in section:
        raise ConfigError(f"missing required config key '{path}.{key}'" if path
                          else f"missing required config key '{key}'")
    return section[key]


def _expect_dict(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"config section '{path}' must be an object")
    return value


def validate_config(cfg: dict) -> dict:
    """Check a parsed config against the closed schema and fill in the
    defaults. Unknown keys anywhere are rejected by their full path."""
    _expect_dict(cfg, "")
    _reject_unknown(cfg, {"seed", "model", "data", "train", "schedule", "hessian"}, "")

    seed = _require(cfg, "seed", "")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"'seed' must be a non-negative integer, got {seed!r}")

    model = _expect_dict(_require(cfg, "model", ""), "model")
    _reject_unknown(
        model, {"input_shape", "layers", "quantized", "quantizer", "first_last"},
        "model",
    )
    input_shape = _require(model, "input_shape", "model")
    if (not isinstance(input_shape, list) or not input_shape
            or not all(isinstance(d, int) and d > 0 for d in input_shape)):
        raise ConfigError("'model.input_shape' must be a list of positive integers")
    layers = _require(model, "layers", "model")
    if not isinstance(layers, list) or not layers:
        raise ConfigError("'model.layers' must be a non-empty list")
    for i, layer in enumerate(layers):
        _expect_dict(layer, f"model.layers[{i}]")
        _reject_unknown(layer, {"kind", "out"}, f"model.layers[{i}]")
        if "kind" not in layer:
            raise ConfigError(f"missing required config key 'model.layers[{i}].kind'")

    data = _expect_dict(_require(cfg, "data", ""), "data")
    _reject_unknown(data, {"train", "val"}, "data")
    for split in ("train", "val"):
        spec = _expect_dict(_require(data, split, "data"), f"data.{split}")
        kind = _require(spec, "kind", f"data.{split}")
        if kind not in _DATASET_KEYS:
            raise ConfigError(
                f"'data.{split}.kind' must be one of "
                f"{', '.join(sorted(_DATASET_KEYS))}, got {kind!r}"
            )
        _reject_unknown(spec, _DATASET_KEYS[kind], f"data.{split}")
        if kind == "mnist-idx":
            _require(spec, "images", f"data.{split}")
            _require(spec, "labels", f"data.{split}")
        else:
            _require(spec, "samples", f"data.{split}")

    train = _expect_dict(_require(cfg, "train", ""), "train")
    _reject_unknown(
        train,
        {"epochs", "batch_size", "lr", "warmup_epochs", "momentum", "a_bits", "act_clip"},
        "train",
    )
    _require(train, "epochs", "train")

    schedule = _expect_dict(cfg.get("schedule", {}), "schedule")
    _reject_unknown(
        schedule,
        {"lambda", "interval", "alpha", "gamma_target", "deadline", "min_bits",
         "hessian_aware"},
        "schedule",
    )
    hessian = _expect_dict(cfg.get("hessian", {}), "hessian")
    _reject_unknown(hessian, {"samples", "batch_size", "eps"}, "hessian")

    out = {
        "seed": seed,
        "model": {
            "input_shape": list(input_shape),
            "layers": [dict(l) for l in layers],
            "quantized": model.get("quantized", True),
            "quantizer": model.get("quantizer", "roundclamp"),
            "first_last": model.get("first_last", "quantize"),
        },
        "data": {s: dict(data[s]) for s in ("train", "val")},
        "train": {
            "epochs": train["epochs"],
            "batch_size": train.get("batch_size", 128),
            "lr": train.get("lr", 0.05),
            "warmup_epochs": train.get("warmup_epochs", 0),
            "momentum": train.get("momentum", 0.9),
            "a_bits": train.get("a_bits"),
            "act_clip": train.get("act_clip", 1.0),
        },
        "schedule": {
            "lambda": schedule.get("lambda", 5e-5),
            "interval": schedule.get("interval", 20),
            "alpha": schedule.get("alpha", 0.3),
            "gamma_target": schedule.get("gamma_target", 1.0),
            "deadline": schedule.get("deadline"),
            "min_bits": schedule.get("min_bits", 1),
            "hessian_aware": schedule.get("hessian_aware", True),
        },
        "hessian": {
            "samples": hessian.get("samples", 8),
            "batch_size": hessian.get("batch_size", 512),
            "eps": hessian.get("eps", 1e-3),
        },
    }
    return out


def load_config(path: str | Path) -> tuple[dict, dict]:
    """Returns (raw config as parsed, normalized config with defaults)."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return raw, validate_config(raw)


def build_dataset(spec: dict, seed: int, split: str) -> DatasetHandle:
    kind = spec["kind"]
    if kind == "mnist-idx":
        return load_mnist_idx(spec["images"], spec["labels"], split=split)
    params = {k: v for k, v in spec.items() if k != "kind"}
    return synthetic_dataset(kind, params, dataset_rng(seed, split), split=split)


def build_model_from_config(norm: dict) -> Model:
    mc = norm["model"]
    try:
        quantizer = QuantizerKind(mc["quantizer"])
    except ValueError:
        raise ConfigError(
            f"'model.quantizer' must be 'roundclamp' or 'dorefa', got {mc['quantizer']!r}"
        ) from None
    spec = ModelSpec(
        input_shape=tuple(mc["input_shape"]),
        layers=[LayerSpec(kind=l["kind"], out=l.get("out")) for l in mc["layers"]],
        quantized=mc["quantized"],
        quantizer=quantizer,
        first_last=mc["first_last"],
    )
    return build_model(spec, seed=norm["seed"], min_bits=norm["schedule"]["min_bits"])


def train_config_from(norm: dict) -> TrainConfig:
    sc = norm["schedule"]
    tc = norm["train"]
    hc = norm["hessian"]
    schedule = ScheduleConfig(
        lam=sc["lambda"], interval=sc["interval"], alpha=sc["alpha"],
        gamma_target=sc["gamma_target"], deadline=sc["deadline"],
        min_bits=sc["min_bits"], hessian_aware=sc["hessian_aware"],
    )
    return TrainConfig(
        epochs=tc["epochs"], batch_size=tc["batch_size"], lr=tc["lr"],
        warmup_epochs=tc["warmup_epochs"], momentum=tc["momentum"],
        seed=norm["seed"], a_bits=tc["a_bits"], act_clip=tc["act_clip"],
        schedule=schedule, hessian_samples=hc["samples"],
        hessian_batch=hc["batch_size"], hessian_eps=hc["eps"],
    )


def _check_data_model_fit(ds: DatasetHandle, norm: dict):
    features = int(np.prod(norm["model"]["input_shape"]))
    if ds.images.shape[1] != features:
        raise ConfigError(
            f"model.input_shape implies {features} features but the "
            f"{ds.split} data has {ds.images.shape[1]}"
        )
    out = norm["model"]["layers"][-1].get("out", 0)
    if ds.num_classes > out:
        raise ConfigError(
            f"{ds.split} data has {ds.num_classes} classes but the last "
            f"layer only emits {out} logits"
        )


def cmd_train(args) -> int:
    raw, norm = load_config(args.config)
    out_dir = Path(args.out_dir)
    train_ds = build_dataset(norm["data"]["train"], norm["seed"], "train")
    val_ds = build_dataset(norm["data"]["val"], norm["seed"], "val")
    _check_data_model_fit(train_ds, norm)
    _check_data_model_fit(val_ds, norm)

    model = build_model_from_config(norm)
    cfg = train_config_from(norm)
    result = train_run(model, train_ds, val_ds, cfg)

    out_dir.mkdir(parents=True, exist_ok=True)
    report = build_run_report({"raw": raw, "resolved": norm}, result)
    save_report(report, out_dir / "report.json")
    write_metrics_csv(out_dir / "metrics.csv", result.metrics)
    save_checkpoint(model, out_dir / "checkpoint.bin",
                    a_bits=cfg.a_bits, act_clip=cfg.act_clip)
    emit_scheme_csv(out_dir / "scheme.csv", result.scheme)
    emit_weight_histogram_csv(out_dir / "weight_histograms.csv", model)
    last_records = None
    for snap in result.snapshots:
        if snap.records is not None:
            last_records = snap.records
    if last_records is not None:
        emit_sensitivity_csv(out_dir / "sensitivity.csv", last_records)

    if not args.no_figures:
        from .figures import render_run_figures

        render_run_figures(report, out_dir / "figures")

    print(f"final_val_acc,{result.final_val_acc!r}")
    print(f"size_fraction,{result.scheme.size_fraction!r}")
    print(f"compression_ratio,{result.scheme.compression_ratio!r}")
    print(f"phase,{result.schedule_state.phase}")
    print(f"events,{len(result.events)}")
    print(f"out_dir,{out_dir}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    _, norm = load_config(args.config)
    ds = build_dataset(norm["data"][args.split], norm["seed"], args.split)
    _check_data_model_fit(ds, norm)
    acc = evaluate(model, ds, meta.get("a_bits"), meta.get("act_clip", 1.0))
    print(f"split,{args.split}")
    print(f"samples,{ds.images.shape[0]}")
    print(f"accuracy,{acc!r}")
    return 0


def cmd_scheme(args) -> int:
    from .report import load_report
    from .schedule import BitScheme

    if bool(args.checkpoint) == bool(args.report):
        raise ConfigError("scheme needs exactly one of --checkpoint or --report")
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        states = model.quant_states()
        if not states:
            raise ConfigError("checkpoint has no quantized layers")
        scheme = scheme_from_states(states)
    else:
        rep = load_report(args.report)
        try:
            entries = [
                (l["layer"], l["bits"], l["weights"])
                for l in rep["final_scheme"]["layers"]
            ]
        except (KeyError, TypeError) as exc:
            raise DataError(f"report {args.report} has no final_scheme table") from exc
        scheme = BitScheme(entries)
    if args.out:
        emit_scheme_csv(args.out, scheme)
    print("layer,bits,weights")
    for i, b, c in scheme.entries:
        print(f"{i},{b},{c}")
    print(f"size_fraction,{scheme.size_fraction!r}")
    print(f"compression_ratio,{scheme.compression_ratio!r}")
    return 0


def cmd_hessian_report(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    if not model.quant_states():
        raise ConfigError("checkpoint has no quantized layers")
    _, norm = load_config(args.config)
    norm["hessian"]["samples"] = args.samples or norm["hessian"]["samples"]
    ds = build_dataset(norm["data"]["train"], norm["seed"], "train")
    _check_data_model_fit(ds, norm)
    cfg = train_config_from(norm)
    n = min(cfg.hessian_batch, ds.images.shape[0])
    records = sensitivity_records(
        model, ds.images[:n], ds.labels[:n], cfg, event_index=0
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_sensitivity_csv(out_dir / "sensitivity.csv", records)
    if not args.no_figures:
        from .figures import plot_sensitivity

        plot_sensitivity(
            [{"layer": r.layer, "omega": r.omega} for r in records],
            out_dir / "sensitivity.png",
        )
    print("layer,trace,gap_sq,omega")
    for r in records:
        print(f"{r.layer},{r.trace!r},{r.gap_sq!r},{r.omega!r}")
    mean = float(np.mean([r.omega for r in records]))
    print(f"omega_mean,{mean!r}")
    speeds = [2 if r.omega < mean else 1 for r in records]
    print(f"prune_speeds,{'|'.join(str(s) for s in speeds)}")
    return 0


def _load_shape_table(name: str) -> dict:
    if name in REFERENCE_SHAPES:
        text = (resources.files("qatlab") / "shapes" / f"{name}.json").read_text()
        return json.loads(text)
    p = Path(name)
    if not p.exists():
        raise ConfigError(
            f"unknown architecture {name!r}: expected one of "
            f"{', '.join(REFERENCE_SHAPES)} or a path to a shape JSON"
        )
    table = json.loads(p.read_text(encoding="utf-8"))
    for key in ("name", "groups", "total_params"):
        if key not in table:
            raise ConfigError(f"shape table {p} is missing '{key}'")
    return table


def cmd_accounting(args) -> int:
    names = list(REFERENCE_SHAPES) if args.arch == "all" else [args.arch]
    print("model,params,split_params,params_millions,split_millions,ratio")
    for name in names:
        table = _load_shape_table(name)
        counts = [int(c) for _, c in table["groups"]]
        base, split, ratio = param_accounting(counts, args.bits)
        if base != int(table["total_params"]):
            raise DataError(
                f"shape table {name}: groups sum to {base}, "
                f"expected {table['total_params']}"
            )
        print(
            f"{table['name']},{base},{split},"
            f"{base / 1e6:.2f},{split / 1e6:.2f},{ratio:.2f}"
        )
    return 0


def cmd_quantizer_table(args) -> int:
    try:
        kind = QuantizerKind(args.kind)
    except ValueError:
        raise ConfigError(
            f"--kind must be 'roundclamp' or 'dorefa', got {args.kind!r}"
        ) from None
    if not 1 <= args.slice < args.bits:
        raise ConfigError(
            f"--slice must lie in [1, bits), got slice={args.slice} bits={args.bits}"
        )
    lines = emit_quantizer_table(args.out, args.bits, args.slice, kind, args.points)
    for line in lines:
        print(line)
    if args.figure:
        from .figures import plot_quantizer_map

        plot_quantizer_map(args.bits, args.slice, kind, args.figure)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qatlab",
        description="Mixed-precision quantization-aware training laboratory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training config end to end")
    p.add_argument("--config", required=True, help="path to the run config JSON")
    p.add_argument("--out-dir", required=True, help="artifact directory")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a config's data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("scheme", help="print a run's per-layer bit assignment")
    p.add_argument("--checkpoint", help="read the scheme from a checkpoint")
    p.add_argument("--report", help="read the scheme from a run report JSON")
    p.add_argument("--out", help="also write the table to this CSV path")
    p.set_defaults(fn=cmd_scheme)

    p = sub.add_parser("hessian-report",
                       help="curvature and sensitivity table for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--samples", type=int, help="override probe count")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_hessian_report)

    p = sub.add_parser("accounting",
                       help="storage accounting vs a bit-split scheme")
    p.add_argument("--arch", default="all",
                   help="resnet20|resnet18|resnet50|all or a shape JSON path")
    p.add_argument("--bits", type=int, default=8, help="bit-split width")
    p.set_defaults(fn=cmd_accounting)

    p = sub.add_parser("quantizer-table", help="sweep a quantizer pair")
    p.add_argument("--bits", type=int, default=3)
    p.add_argument("--slice", type=int, default=1)
    p.add_argument("--kind", default="roundclamp")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--points", type=int, default=33)
    p.add_argument("--figure", help="also render the quantizer map PNG here")
    p.set_defaults(fn=cmd_quantizer_table)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
