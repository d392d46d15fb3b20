"""Ablation matrix: train/evaluate every gate configuration at shared seeds."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, config_from_dict
from .errors import ConfigError, ModaError
from .train import evaluate, train_stage1, train_stage2

_ROW_FIELDS = [
    "cell", "seed", "use_moda", "variant", "aux_l1", "n_layers", "placement",
    "accuracy", "paired_accuracy", "mean_mask", "mask_sparsity", "val_loss", "error",
]


@dataclass
class AblationCell:
    name: str
    use_moda: bool = True
    variant: str | None = None
    aux_l1: float | None = None
    l1_on_logits: bool = False
    n_layers: int | None = None
    n_heads: int | None = None
    placement: str | None = None

    def apply(self, base: RunConfig) -> RunConfig:
        moda = dataclasses.replace(
            base.moda,
            variant=self.variant if self.variant is not None else base.moda.variant,
            aux_l1=self.aux_l1,
            l1_on_logits=self.l1_on_logits,
            n_layers=self.n_layers if self.n_layers is not None else base.moda.n_layers,
            n_heads=self.n_heads if self.n_heads is not None else base.moda.n_heads,
            placement=self.placement if self.placement is not None else base.moda.placement,
        )
        return dataclasses.replace(base, moda=moda, use_moda=self.use_moda)


def load_matrix(path) -> tuple[RunConfig, list[int], list[AblationCell], int | None]:
    payload = json.loads(Path(path).read_text())
    if not isinstance(payload, dict):
        raise ConfigError("ablation matrix must be a JSON object")
    unknown = sorted(set(payload) - {"base", "seeds", "cells", "eval_limit"})
    if unknown:
        raise ConfigError(f"ablation matrix: unknown keys {unknown}")
    base = config_from_dict(payload.get("base", {}))
    seeds = [int(s) for s in payload.get("seeds", [0])]
    cells = []
    for raw in payload.get("cells", []):
        known = {f.name for f in dataclasses.fields(AblationCell)}
        bad = sorted(set(raw) - known)
        if bad:
            raise ConfigError(f"ablation cell: unknown keys {bad}")
        cells.append(AblationCell(**raw))
    if not cells:
        raise ConfigError("ablation matrix has no cells")
    names = [c.name for c in cells]
    if len(set(names)) != len(names):
        raise ConfigError("ablation cell names must be unique")
    limit = payload.get("eval_limit")
    return base, seeds, cells, None if limit is None else int(limit)


def run_ablation(base: RunConfig, seeds: list[int], cells: list[AblationCell],
                 out_dir: Path | str, eval_limit: int | None = None) -> list[dict]:
    """One stage-1 run per seed (shared across cells), then stage 2 and an
    eval per (cell, seed). Per-cell failures are recorded; the run continues.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for seed in seeds:
        seed_dir = out / f"seed{seed}"
        base_seed = dataclasses.replace(base, seed=seed, out_dir=str(seed_dir))
        stage1_ckpt, _ = train_stage1(base_seed, seed_dir / "stage1")
        for cell in cells:
            cfg = cell.apply(base_seed)
            row = {
                "cell": cell.name,
                "seed": seed,
                "use_moda": cfg.use_moda,
                "variant": cfg.moda.variant if cfg.use_moda else "",
                "aux_l1": cfg.moda.aux_l1 if cfg.use_moda else None,
                "n_layers": cfg.moda.n_layers if cfg.use_moda else None,
                "placement": cfg.moda.placement if cfg.use_moda else "",
                "accuracy": None, "paired_accuracy": None, "mean_mask": None,
                "mask_sparsity": None, "val_loss": None, "error": "",
            }
            try:
                cfg.validate()
                cell_dir = seed_dir / cell.name
                ckpt, _ = train_stage2(cfg, stage1_ckpt, cell_dir)
                rec = evaluate(cfg, ckpt, split="test", limit=eval_limit)
                row.update(
                    accuracy=rec.val_acc,
                    paired_accuracy=rec.paired_acc,
                    mean_mask=rec.mean_mask,
                    mask_sparsity=rec.mask_sparsity,
                    val_loss=rec.val_loss,
                )
            except ModaError as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    rows.sort(key=lambda r: (r["paired_accuracy"] is None,
                             -(r["paired_accuracy"] or 0.0), r["cell"], r["seed"]))
    return rows


def write_summary(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_ROW_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in _ROW_FIELDS})
    return path
