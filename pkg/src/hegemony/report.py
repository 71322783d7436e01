"""Report files for the CLI: delimited data plus a rendered figure.

Benchmarks land as a CSV of per-layer wall times with a grouped bar
chart; federated runs land as the transcript's JSON lines with a stacked
per-round phase chart.  Rendering uses the Agg canvas so it works
headless.
"""

from __future__ import annotations

import csv
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["BenchRow", "write_bench_csv", "render_bench_png", "write_fed_jsonl", "render_fed_png"]


class BenchRow(dict):
    """One timed step: arch, size, backend, layer, seconds."""

    FIELDS = ("arch", "size", "backend", "layer", "seconds")


def write_bench_csv(rows: Sequence[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BenchRow.FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in BenchRow.FIELDS})


def render_bench_png(rows: Sequence[dict], path: str) -> None:
    """Per-layer stacked bars, one bar per (arch, backend) pair."""
    groups: dict[str, list[tuple[str, float]]] = {}
    for row in rows:
        key = f"{row['arch']}/{row['backend']}@{row['size']}"
        groups.setdefault(key, []).append((row["layer"], float(row["seconds"])))
    fig, ax = plt.subplots(figsize=(7, 4))
    keys = list(groups)
    for i, key in enumerate(keys):
        bottom = 0.0
        for layer, seconds in groups[key]:
            ax.bar(i, seconds, bottom=bottom, width=0.6, label=layer)
            bottom += seconds
        ax.text(i, bottom, f"{bottom:.1f}s", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=15, ha="right", fontsize=8)
    ax.set_ylabel("seconds")
    ax.set_title("per-layer inference time")
    # one legend entry per distinct layer name
    handles, labels = ax.get_legend_handles_labels()
    seen: dict[str, object] = {}
    for h, l in zip(handles, labels):
        seen.setdefault(l, h)
    ax.legend(seen.values(), seen.keys(), fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_fed_jsonl(lines: Sequence[str], path: str) -> None:
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")


def render_fed_png(transcript, path: str) -> None:
    """Stacked phase seconds per round from an AggregationTranscript."""
    phases = ["local_update", "encrypt", "aggregate", "decrypt"]
    colors = {"local_update": "#4878cf", "encrypt": "#6acc65", "aggregate": "#d65f5f", "decrypt": "#b47cc7"}
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, rec in enumerate(transcript.rounds):
        seconds = rec.phase_seconds
        bottom = 0.0
        for ph in phases:
            v = seconds.get(ph, 0.0)
            ax.bar(i, v, bottom=bottom, width=0.6, color=colors[ph],
                   label=ph if i == 0 else None)
            bottom += v
        if rec.abort:
            ax.text(i, bottom, "abort", ha="center", va="bottom", fontsize=8, color="red")
    ax.set_xticks(range(len(transcript.rounds)))
    ax.set_xticklabels([f"round {r.index}" for r in transcript.rounds], fontsize=8)
    ax.set_ylabel("seconds")
    ax.set_title(f"aggregation phases ({transcript.clients} clients, {transcript.key_bits}-bit key)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
