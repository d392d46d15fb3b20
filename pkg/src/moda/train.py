"""Two-stage training loops, evaluation, metrics and mask export."""

from __future__ import annotations

import csv
import json
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .adapter import compute_mask
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    DatasetSplit,
    caption_batch,
    counterfactual_pair,
    gen_dataset,
    query_batch,
)
from .errors import ConfigError, InputError, NumericsError
from .model import Batch, MLLMModel, embed_instruction, forward_train, generate_batch
from .optim import AdamW, WarmupCosine
from .rng import Rng
from .tensor import add, matmul, no_grad

_EVAL_CHUNK = 64
_ANSWER_TOKENS = 2  # value token + EOS


@dataclass
class MetricsRecord:
    step: int
    stage: int
    train_loss: float | None = None
    val_loss: float | None = None
    val_acc: float | None = None
    paired_acc: float | None = None
    mean_mask: float | None = None
    mask_sparsity: float | None = None
    lr: float | None = None
    wall_time: float | None = None


class MetricsWriter:
    """Line-delimited records. Wall time is nondeterministic, so it goes to
    a sidecar; metrics.jsonl stays byte-identical across reruns."""

    def __init__(self, out_dir: Path):
        self.metrics_path = out_dir / "metrics.jsonl"
        self.timings_path = out_dir / "timings.jsonl"
        self._metrics = open(self.metrics_path, "w")
        self._timings = open(self.timings_path, "w")

    def append(self, rec: MetricsRecord) -> None:
        payload = asdict(rec)
        wall = payload.pop("wall_time")
        self._metrics.write(json.dumps(payload, sort_keys=True) + "\n")
        self._timings.write(json.dumps(
            {"stage": rec.stage, "step": rec.step, "wall_time": wall}) + "\n")

    def close(self) -> None:
        self._metrics.close()
        self._timings.close()


_dataset_cache: dict[tuple, DatasetSplit] = {}


def dataset_for(cfg: RunConfig) -> DatasetSplit:
    key = (cfg.task.canonical_json(), cfg.data_seed, tuple(cfg.sizes))
    if key not in _dataset_cache:
        _dataset_cache[key] = gen_dataset(cfg.task, cfg.data_seed, tuple(cfg.sizes))
    return _dataset_cache[key]


def build_model(cfg: RunConfig, use_moda: bool) -> MLLMModel:
    return MLLMModel.build(cfg.dims, cfg.moda if use_moda else None,
                           Rng(cfg.seed, "model"))


def _mask_stats(masks) -> tuple[float | None, float | None]:
    if not masks:
        return None, None
    vals = np.concatenate([m.values.data.reshape(-1) for m in masks])
    return float(vals.mean()), float((vals < 0.1).mean())


def _batch_for_stage(stage: int, samples, spec) -> Batch:
    if stage == 1:
        feats, instr, targets = caption_batch(samples, spec)
    else:
        feats, instr, targets = query_batch(samples, spec)
    return Batch(image_feats=feats, instr_ids=instr, target_ids=targets)


def _val_loss(model: MLLMModel, batch: Batch) -> float:
    with no_grad():
        loss, _ = forward_train(batch, model)
    return float(loss.data)


def eval_answers(model: MLLMModel, samples, spec) -> tuple[float, float]:
    """Greedy-decode accuracy and counterfactual paired accuracy."""
    pairs = [counterfactual_pair(s, spec) for s in samples]
    first_ok = np.zeros(len(samples), dtype=bool)
    second_ok = np.zeros(len(samples), dtype=bool)
    for member, ok in ((0, first_ok), (1, second_ok)):
        group = [p[member] for p in pairs]
        for lo in range(0, len(group), _EVAL_CHUNK):
            chunk = group[lo:lo + _EVAL_CHUNK]
            feats, instr, _ = query_batch(chunk, spec)
            decoded = generate_batch(model, feats, instr, _ANSWER_TOKENS)
            answers = np.array([s.answer_id for s in chunk])
            ok[lo:lo + len(chunk)] = decoded[:, 0] == answers
    accuracy = float(first_ok.mean())
    paired = float((first_ok & second_ok).mean())
    return accuracy, paired


def masks_for_samples(model: MLLMModel, samples, spec,
                      counterfactual: bool = False) -> np.ndarray:
    """[S, N, E] gate values for each sample's instruction (or its
    counterfactual partner's). Uses the first adapter instance."""
    if model.moda_cfg is None or not model.moda:
        raise ConfigError("checkpoint has no modulation adapter to inspect")
    chosen = [counterfactual_pair(s, spec)[1] if counterfactual else s for s in samples]
    feats, instr, _ = query_batch(chosen, spec)
    with no_grad():
        v = matmul(model.stub.forward(feats), model.adapter.w)
        v = add(v, model.adapter.b)
        t_instr = embed_instruction(instr, model.lm)
        mask = compute_mask(v, t_instr, model.moda[0], model.moda_cfg)
    return mask.values.data.copy()


def _run_stage(cfg: RunConfig, model: MLLMModel, stage: int, out_dir: Path) -> tuple[Path, dict]:
    out_dir.mkdir(parents=True, exist_ok=True)
    data = dataset_for(cfg)
    spec = cfg.task
    opt_cfg = cfg.optim
    steps = opt_cfg.steps_stage1 if stage == 1 else opt_cfg.steps_stage2
    base_lr = opt_cfg.stage1_lr if stage == 1 else opt_cfg.stage2_lr
    batch_size = opt_cfg.batch_stage1 if stage == 1 else opt_cfg.batch_stage2

    model.set_stage(stage)
    schedule = WarmupCosine(base_lr, steps, opt_cfg.warmup_frac)
    optimizer = AdamW(model.trainable_params(), schedule,
                      weight_decay=opt_cfg.weight_decay)

    batch_rng = Rng(cfg.seed, f"stage{stage}.batch")
    val_samples = data.val[:opt_cfg.eval_samples]
    val_batch = _batch_for_stage(stage, val_samples, spec)

    writer = MetricsWriter(out_dir)
    summary: dict = {"stage": stage, "steps": steps}
    try:
        for step in range(1, steps + 1):
            tic = time.monotonic()
            idx = batch_rng.child(step).integers(0, len(data.train), batch_size)
            batch = _batch_for_stage(stage, [data.train[i] for i in idx], spec)
            optimizer.zero_grad()
            try:
                loss, masks = forward_train(batch, model)
                loss.backward()
            except NumericsError as exc:
                raise NumericsError(f"stage {stage}, step {step}: {exc}") from exc
            lr = optimizer.step()
            mean_mask, sparsity = _mask_stats(masks)

            rec = MetricsRecord(step=step, stage=stage, train_loss=float(loss.data),
                                mean_mask=mean_mask, mask_sparsity=sparsity, lr=lr)
            if step % opt_cfg.eval_every == 0 or step == steps:
                rec.val_loss = _val_loss(model, val_batch)
                if stage == 2:
                    rec.val_acc, rec.paired_acc = eval_answers(model, val_samples, spec)
            rec.wall_time = time.monotonic() - tic
            writer.append(rec)
            if step == 1:
                summary["first_train_loss"] = rec.train_loss
            if step == steps:
                summary.update(
                    final_train_loss=rec.train_loss,
                    final_val_loss=rec.val_loss,
                    final_val_acc=rec.val_acc,
                    final_paired_acc=rec.paired_acc,
                    final_lr=rec.lr,
                )
    finally:
        writer.close()

    if model.moda_cfg is not None and model.moda:
        final_masks = masks_for_samples(model, val_samples, spec)
        summary["final_mean_mask"] = float(final_masks.mean())
        summary["final_mask_sparsity"] = float((final_masks < 0.1).mean())
    else:
        summary["final_mean_mask"] = None
        summary["final_mask_sparsity"] = None

    ckpt_path = out_dir / "ckpt.bin"
    params = {name: t.data for name, t in model.named_params().items()}
    cfg_hash = stage1_config_hash(cfg) if stage == 1 else cfg.config_hash()
    save_checkpoint(ckpt_path, Checkpoint(
        params=params,
        opt_m=optimizer.m,
        opt_v=optimizer.v,
        step=optimizer.step_count,
        seed=cfg.seed,
        stage=stage,
        config_hash=cfg_hash,
    ))
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ckpt_path, summary


def stage1_config_hash(cfg: RunConfig) -> int:
    """Hash of the config subset a stage-1 checkpoint depends on.

    The gate configuration is irrelevant in stage 1 (the adapter trains
    without it), so ablation cells that differ only in gate settings can
    legitimately share one stage-1 checkpoint.
    """
    relevant = {
        "dims": asdict(cfg.dims),
        "task": asdict(cfg.task),
        "sizes": list(cfg.sizes),
        "seed": cfg.seed,
        "data_seed": cfg.data_seed,
        "stage1_lr": cfg.optim.stage1_lr,
        "steps_stage1": cfg.optim.steps_stage1,
        "batch_stage1": cfg.optim.batch_stage1,
        "warmup_frac": cfg.optim.warmup_frac,
        "weight_decay": cfg.optim.weight_decay,
    }
    return zlib.crc32(json.dumps(relevant, sort_keys=True, separators=(",", ":")).encode())


def train_stage1(cfg: RunConfig, out_dir: Path | str | None = None) -> tuple[Path, dict]:
    """Adapter-only alignment on the caption surrogate; everything else frozen."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else Path(cfg.out_dir) / "stage1"
    model = build_model(cfg, use_moda=False)
    return _run_stage(cfg, model, 1, out)


def warm_start_stage2(cfg: RunConfig, stage1_ckpt: Path | str) -> MLLMModel:
    """Model ready for stage 2: gate params fresh (Xavier), everything else
    taken from the stage-1 checkpoint."""
    ckpt = load_checkpoint(stage1_ckpt)
    if ckpt.stage != 1:
        raise ConfigError(f"{stage1_ckpt} holds a stage-{ckpt.stage} checkpoint, "
                          "stage 2 must start from a stage-1 run")
    load_checkpoint(stage1_ckpt, expected_config_hash=stage1_config_hash(cfg))
    model = build_model(cfg, use_moda=cfg.use_moda)
    params = model.named_params()
    for name, arr in ckpt.params.items():
        if name not in params:
            raise ConfigError(f"stage-1 checkpoint has unexpected tensor {name!r}")
        params[name].data = arr.astype(np.float64).copy()
    return model


def train_stage2(cfg: RunConfig, stage1_ckpt: Path | str,
                 out_dir: Path | str | None = None) -> tuple[Path, dict]:
    """Instruction tuning: fresh gate params, adapter warm-started from
    stage 1, adapter+LM+gate trainable."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else Path(cfg.out_dir) / "stage2"
    model = warm_start_stage2(cfg, stage1_ckpt)
    return _run_stage(cfg, model, 2, out)


def model_from_checkpoint(cfg: RunConfig, ckpt_path: Path | str) -> tuple[MLLMModel, Checkpoint]:
    cfg.validate()
    probe = load_checkpoint(ckpt_path)
    expected = stage1_config_hash(cfg) if probe.stage == 1 else cfg.config_hash()
    ckpt = load_checkpoint(ckpt_path, expected_config_hash=expected)
    use_moda = cfg.use_moda and ckpt.stage == 2
    model = build_model(cfg, use_moda=use_moda)
    model.load_state(ckpt.params)
    model.set_stage(ckpt.stage if ckpt.stage in (1, 2) else 2)
    return model, ckpt


def evaluate(cfg: RunConfig, ckpt_path: Path | str, split: str = "test",
             limit: int | None = None) -> MetricsRecord:
    """Greedy-decode answer accuracy and counterfactual paired accuracy."""
    model, ckpt = model_from_checkpoint(cfg, ckpt_path)
    data = dataset_for(cfg)
    try:
        samples = getattr(data, split)
    except AttributeError:
        raise ConfigError(f"unknown split {split!r}") from None
    if limit is not None:
        samples = samples[:limit]
    if not samples:
        raise InputError(f"split {split!r} is empty")
    val_batch = _batch_for_stage(2, samples, cfg.task)
    acc, paired = eval_answers(model, samples, cfg.task)
    mean_mask = sparsity = None
    if model.moda_cfg is not None:
        masks = masks_for_samples(model, samples, cfg.task)
        mean_mask, sparsity = float(masks.mean()), float((masks < 0.1).mean())
    return MetricsRecord(
        step=ckpt.step, stage=ckpt.stage,
        val_loss=_val_loss(model, val_batch),
        val_acc=acc, paired_acc=paired,
        mean_mask=mean_mask, mask_sparsity=sparsity,
    )


def inspect_mask(cfg: RunConfig, ckpt_path: Path | str, sample_ids: list[int],
                 out_path: Path | str, counterfactual: bool = False) -> Path:
    """CSV of gate values: sample_id,token_index,channel_index,mask_value."""
    model, _ = model_from_checkpoint(cfg, ckpt_path)
    if model.moda_cfg is None or not model.moda:
        raise ConfigError("checkpoint has no modulation adapter to inspect")
    data = dataset_for(cfg)
    by_id = {s.sample_id: s for split in (data.train, data.val, data.test) for s in split}
    try:
        samples = [by_id[i] for i in sample_ids]
    except KeyError as exc:
        raise InputError(f"unknown sample id {exc.args[0]}") from None
    masks = masks_for_samples(model, samples, cfg.task, counterfactual=counterfactual)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "token_index", "channel_index", "mask_value"])
        for sid, grid in zip(sample_ids, masks):
            for n in range(grid.shape[0]):
                for e in range(grid.shape[1]):
                    writer.writerow([sid, n, e, repr(float(grid[n, e]))])
    return out_path
