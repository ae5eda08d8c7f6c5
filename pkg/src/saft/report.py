"""Artifact emission: CSV tables, JSON-lines metrics, SVG sensitivity plots.

CSV output is byte-reproducible for a fixed config and seed; anything
wall-clock based (timings, measured speed ratios) goes to the JSON-lines
stream and the rendered text tables instead, so re-running an experiment can
be diffed file-for-file.
"""

from __future__ import annotations

import csv
import io
import json
from typing import Mapping, Optional, Sequence

from .model import ModelGraph
from .sensitivity import SensitivityReport


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def sensitivity_csv(report: SensitivityReport, model: ModelGraph,
                    kl: Optional[Mapping[str, float]] = None) -> str:
    """Schema: layer_id, layer_index, kind, std, kl, rank, selected."""
    rank_of = {lid: i + 1 for i, lid in enumerate(report.ranking)}
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["layer_id", "layer_index", "kind", "std", "kl", "rank", "selected"])
    for index, layer in enumerate(model.layers):
        stats = report.per_layer[layer.id]
        kl_value = kl.get(layer.id) if kl is not None else stats.kl
        writer.writerow(
            [
                layer.id,
                index,
                layer.kind,
                _fmt(stats.std),
                "" if kl_value is None else _fmt(kl_value),
                rank_of.get(layer.id, ""),
                "true" if layer.id in report.selected else "false",
            ]
        )
    return buf.getvalue()


def compare_csv(rows: Sequence[Mapping]) -> str:
    """One row per noise configuration; the speed column is the deterministic
    parameter-gradient work ratio (wall-clock ratios live in the JSONL)."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["mode", "distribution", "scale", "clean", "untrained",
         "noise_injection", "saft", "speedup_work"]
    )
    for row in rows:
        writer.writerow(
            [
                row["mode"],
                row["distribution"],
                _fmt(row["scale"]),
                _fmt(row["clean"]),
                _fmt(row["untrained"]),
                _fmt(row["noise_injection"]),
                _fmt(row["saft"]),
                _fmt(row["speedup_work"]),
            ]
        )
    return buf.getvalue()


def compare_text(rows: Sequence[Mapping]) -> str:
    header = (
        f"{'noise':<28}{'clean':>8}{'untrained':>11}{'noise-inj':>11}"
        f"{'saft':>8}{'speed(work)':>13}{'speed(wall)':>13}"
    )
    lines = [header, "-" * len(header)]
    for row in rows:
        name = f"{row['mode']} {row['distribution']} {row['scale']:g}"
        lines.append(
            f"{name:<28}"
            f"{100 * row['clean']:>8.2f}"
            f"{100 * row['untrained']:>11.2f}"
            f"{100 * row['noise_injection']:>11.2f}"
            f"{100 * row['saft']:>8.2f}"
            f"{row['speedup_work']:>12.2f}x"
            f"{row['speedup_wall']:>12.2f}x"
        )
    return "\n".join(lines) + "\n"


def oracle_csv(model: ModelGraph, stds: Mapping[str, float], kls: Mapping[str, float],
               drops: Mapping[str, float]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["layer_id", "layer_index", "kind", "std", "kl", "oracle_drop"])
    for index, layer in enumerate(model.layers):
        if layer.id not in drops:
            continue
        writer.writerow(
            [
                layer.id,
                index,
                layer.kind,
                _fmt(stds[layer.id]),
                _fmt(kls[layer.id]),
                _fmt(drops[layer.id]),
            ]
        )
    return buf.getvalue()


def jsonl_line(record: Mapping) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def train_result_record(result, label: str) -> dict:
    return {
        "run": label,
        "final_accuracy_clean": result.final_accuracy_clean,
        "final_accuracy_noisy": result.final_accuracy_noisy,
        "per_epoch_loss": result.per_epoch_loss,
        "per_epoch_wall_ms": result.per_epoch_wall_ms,
        "wall_time_ms": result.wall_time_ms,
        "grad_update_count": dict(sorted(result.grad_update_count.items())),
        "param_grad_scalars": result.param_grad_scalars,
        "trainable_param_count": result.trainable_param_count,
        "total_param_count": result.total_param_count,
    }


def sensitivity_svg(report: SensitivityReport, model: ModelGraph, path) -> None:
    """Bar plot of per-layer std by layer index; selected layers starred."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    indices = list(range(len(model.layers)))
    stds = [report.per_layer[layer.id].std for layer in model.layers]
    chosen = [i for i, layer in enumerate(model.layers) if layer.id in report.selected]
    fig, ax = plt.subplots(figsize=(max(6, len(indices) * 0.45), 3.5))
    ax.bar(indices, stds, color="#4878a8")
    if chosen:
        top = max(stds) if max(stds) > 0 else 1.0
        ax.plot(
            chosen,
            [stds[i] + 0.04 * top for i in chosen],
            marker="*",
            linestyle="none",
            markersize=12,
            color="#7b2d8b",
            label="selected for training",
        )
        ax.legend(loc="upper center")
    ax.set_xticks(indices)
    ax.set_xticklabels([layer.id for layer in model.layers], rotation=60, fontsize=7)
    ax.set_xlabel("layer")
    ax.set_ylabel("output-difference std")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
