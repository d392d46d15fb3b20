"""Render figures next to the delimited outputs of a run directory.

Every plot reads the emitted files (metrics.jsonl, mask CSV, ablation
summary CSV), never live model state, so figures can be regenerated from
any finished run.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def render_training_curves(metrics_path, out_png) -> Path:
    records = _read_jsonl(metrics_path)
    if not records:
        raise ValueError(f"{metrics_path} holds no records")
    steps = [r["step"] for r in records]
    stage = records[0].get("stage", "?")

    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(steps, [r["train_loss"] for r in records], label="train loss", lw=1.0)
    val_pts = [(r["step"], r["val_loss"]) for r in records if r.get("val_loss") is not None]
    if val_pts:
        ax.plot(*zip(*val_pts), "o-", ms=3, label="val loss")
    acc_pts = [(r["step"], r["val_acc"]) for r in records if r.get("val_acc") is not None]
    pair_pts = [(r["step"], r["paired_acc"]) for r in records if r.get("paired_acc") is not None]
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"stage {stage} training")

    ax2 = ax.twinx()
    ax2.plot(steps, [r.get("lr") for r in records], color="tab:green", alpha=0.5,
             lw=0.8, label="lr")
    if acc_pts:
        ax2.plot(*zip(*acc_pts), "s--", ms=3, color="tab:red", label="val acc")
    if pair_pts:
        ax2.plot(*zip(*pair_pts), "^--", ms=3, color="tab:purple", label="paired acc")
    ax2.set_ylabel("lr / accuracy")

    lines1, labels1 = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines1 + lines2, labels1 + labels2, loc="best", fontsize=8)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_mask_heatmap(mask_csv, out_png, sample_id: int | None = None) -> Path:
    grids: dict[int, dict[tuple[int, int], float]] = defaultdict(dict)
    with open(mask_csv) as fh:
        for row in csv.DictReader(fh):
            grids[int(row["sample_id"])][(int(row["token_index"]), int(row["channel_index"]))] = \
                float(row["mask_value"])
    if not grids:
        raise ValueError(f"{mask_csv} holds no mask rows")
    sid = sample_id if sample_id is not None else sorted(grids)[0]
    if sid not in grids:
        raise ValueError(f"sample id {sid} not present in {mask_csv}")
    cells = grids[sid]
    n = max(k[0] for k in cells) + 1
    e = max(k[1] for k in cells) + 1
    img = [[cells[(i, j)] for j in range(e)] for i in range(n)]

    fig, ax = plt.subplots(figsize=(7, 3.2))
    im = ax.imshow(img, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xlabel("channel")
    ax.set_ylabel("visual token")
    ax.set_title(f"gate values, sample {sid}")
    fig.colorbar(im, ax=ax, label="gate")
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_ablation_chart(summary_csv, out_png) -> Path:
    per_cell: dict[str, list[float]] = defaultdict(list)
    singles: dict[str, list[float]] = defaultdict(list)
    with open(summary_csv) as fh:
        for row in csv.DictReader(fh):
            if row.get("paired_accuracy"):
                per_cell[row["cell"]].append(float(row["paired_accuracy"]))
            if row.get("accuracy"):
                singles[row["cell"]].append(float(row["accuracy"]))
    if not per_cell:
        raise ValueError(f"{summary_csv} holds no successful cells")
    cells = sorted(per_cell, key=lambda c: -sum(per_cell[c]) / len(per_cell[c]))
    paired_means = [sum(per_cell[c]) / len(per_cell[c]) for c in cells]
    single_means = [sum(singles[c]) / len(singles[c]) if singles[c] else 0.0 for c in cells]

    x = range(len(cells))
    fig, ax = plt.subplots(figsize=(max(5, 1.3 * len(cells)), 4))
    ax.bar([i - 0.18 for i in x], single_means, width=0.36, label="accuracy")
    ax.bar([i + 0.18 for i in x], paired_means, width=0.36, label="paired accuracy")
    ax.set_xticks(list(x))
    ax.set_xticklabels(cells, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy (mean over seeds)")
    ax.set_title("ablation summary")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_run(run_dir) -> list[Path]:
    """Render every figure the files under run_dir support."""
    run_dir = Path(run_dir)
    rendered: list[Path] = []
    for metrics in sorted(run_dir.rglob("metrics.jsonl")):
        rendered.append(render_training_curves(metrics, metrics.parent / "curves.png"))
    for mask_csv in sorted(run_dir.rglob("*mask*.csv")):
        rendered.append(render_mask_heatmap(mask_csv, mask_csv.with_suffix(".png")))
    for summary in sorted(run_dir.rglob("ablation_summary.csv")):
        rendered.append(render_ablation_chart(summary, summary.parent / "ablation_summary.png"))
    return rendered
