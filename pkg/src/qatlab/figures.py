"""Matplotlib renderings of run artifacts, saved straight to files.

Uses the Agg backend so figures render headless. Each function takes
already-computed data (a run report dict, a model, sensitivity records)
and writes one PNG.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .quantize import QuantizerKind, dequantize, quant_code


def _save(fig, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def plot_training_curves(report: dict, path: str | Path):
    """Validation accuracy and size fraction per epoch, with pruning
    events marked."""
    metrics = report["metrics"]
    epochs = [m["epoch"] for m in metrics]
    acc = [m["val_acc"] for m in metrics]
    gamma = [m["gamma"] for m in metrics]

    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(epochs, acc, color="tab:blue", label="val accuracy")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("validation accuracy", color="tab:blue")
    ax1.tick_params(axis="y", labelcolor="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, gamma, color="tab:red", label="size fraction")
    ax2.set_ylabel("size fraction", color="tab:red")
    ax2.tick_params(axis="y", labelcolor="tab:red")
    for e in sorted({ev["epoch"] for ev in report.get("events", [])}):
        ax1.axvline(e, color="gray", linestyle=":", linewidth=0.8)
    target = report.get("config", {}).get("schedule", {}).get("gamma_target")
    if isinstance(target, (int, float)):
        ax2.axhline(target, color="tab:red", linestyle="--", linewidth=0.8)
    ax1.set_title("training progress")
    fig.tight_layout()
    _save(fig, path)


def plot_bit_scheme(report: dict, path: str | Path):
    """Final per-layer precision as a bar chart."""
    layers = report["final_scheme"]["layers"]
    idx = [l["layer"] for l in layers]
    bits = [l["bits"] for l in layers]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(idx, bits, color="tab:purple")
    ax.set_xlabel("layer")
    ax.set_ylabel("bits")
    ax.set_xticks(idx)
    ax.set_yticks(range(0, max(bits) + 2))
    ratio = report["final_scheme"]["compression_ratio"]
    ax.set_title(f"final bit scheme ({ratio:.1f}x compression)")
    fig.tight_layout()
    _save(fig, path)


def plot_sensitivity(records: list[dict], path: str | Path):
    """Per-layer pruning sensitivity with its mean; layers under the
    mean are the fast-prune candidates."""
    idx = [r["layer"] for r in records]
    om = [r["omega"] for r in records]
    mean = float(np.mean(om))
    colors = ["tab:green" if o < mean else "tab:orange" for o in om]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(idx, om, color=colors)
    ax.axhline(mean, color="black", linestyle="--", linewidth=0.9, label="mean")
    ax.set_xlabel("layer")
    ax.set_ylabel("sensitivity")
    ax.set_xticks(idx)
    ax.legend()
    ax.set_title("layer sensitivity (green prunes 2 bits)")
    fig.tight_layout()
    _save(fig, path)


def plot_quantizer_map(bits: int, slice_bits: int, kind: QuantizerKind,
                       path: str | Path, points: int = 513):
    """Reconstruction staircases of the full and coarse quantizers over
    [0, 1], showing how the coarse bins sit relative to the fine ones."""
    u = np.linspace(0.0, 1.0, points)
    full = dequantize(quant_code(u, bits, kind), bits)
    coarse = dequantize(quant_code(u, bits - slice_bits, kind), bits - slice_bits)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    ax.plot(u, u, color="lightgray", linewidth=0.8, label="identity")
    ax.step(u, full, where="post", label=f"{bits}-bit")
    ax.step(u, coarse, where="post", label=f"{bits - slice_bits}-bit")
    ax.set_xlabel("normalized weight")
    ax.set_ylabel("reconstruction")
    ax.legend()
    ax.set_title(f"{kind.value} quantizer map")
    fig.tight_layout()
    _save(fig, path)


def plot_weight_histograms(hists: list[dict], path: str | Path):
    """Normalized-weight histograms, one panel per quantized layer.
    Accepts the dicts stored in a run report (or from
    report.weight_histograms on a live model)."""
    if not hists:
        return
    n = len(hists)
    ncols = min(3, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 2.8 * nrows),
                             squeeze=False)
    for ax in axes.ravel()[n:]:
        ax.axis("off")
    for h, ax in zip(hists, axes.ravel()):
        edges = np.asarray(h["edges"], dtype=np.float64)
        counts = np.asarray(h["counts"], dtype=np.float64)
        centers = (edges[:-1] + edges[1:]) / 2
        ax.bar(centers, counts, width=1.0 / counts.size, color="tab:cyan")
        ax.set_title(f"layer {h['layer']} ({h['bits']} bits)", fontsize=9)
        ax.set_xlim(0, 1)
    fig.suptitle("normalized weight distributions")
    fig.tight_layout()
    _save(fig, path)


def render_run_figures(report: dict, out_dir: str | Path) -> list[Path]:
    """Standard figure set for one run, entirely from the report dict;
    returns the written paths."""
    out = Path(out_dir)
    written = []
    p = out / "training_curves.png"
    plot_training_curves(report, p)
    written.append(p)
    p = out / "bit_scheme.png"
    plot_bit_scheme(report, p)
    written.append(p)
    last_records = None
    for s in report.get("event_snapshots", []):
        if s.get("records"):
            last_records = s["records"]
    if last_records:
        p = out / "sensitivity.png"
        plot_sensitivity(last_records, p)
        written.append(p)
    hists = report.get("weight_histograms", [])
    if hists:
        p = out / "weight_histograms.png"
        plot_weight_histograms(hists, p)
        written.append(p)
    return written
