"""Command-line driver: training, evaluation, checks, exports, figures.

Exit codes: 0 success, 1 contract/config error, 2 numerical failure
(non-finite values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import ablation, gradcheck, report
from .config import RunConfig, load_config, save_config
from .data import write_split
from .errors import ConfigError, GradCheckError, ModaError, NumericsError
from .model import generate as generate_tokens
from .train import (
    dataset_for,
    evaluate,
    inspect_mask,
    model_from_checkpoint,
    train_stage1,
    train_stage2,
)


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    cfg.validate()
    return cfg


def _cmd_train_stage1(args) -> int:
    cfg = _load_cfg(args)
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_root / "config.json")
    ckpt, summary = train_stage1(cfg)
    print(f"stage-1 checkpoint: {ckpt}")
    print(json.dumps(summary, indent=2, sort_keys=True))
    if not args.no_figures:
        for fig in report.render_run(ckpt.parent):
            print(f"figure: {fig}")
    return 0


def _cmd_train_stage2(args) -> int:
    cfg = _load_cfg(args)
    ckpt, summary = train_stage2(cfg, args.ckpt)
    print(f"stage-2 checkpoint: {ckpt}")
    print(json.dumps(summary, indent=2, sort_keys=True))
    if not args.no_figures:
        for fig in report.render_run(ckpt.parent):
            print(f"figure: {fig}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    rec = evaluate(cfg, args.ckpt, split=args.split, limit=args.limit)
    print(json.dumps(dataclasses.asdict(rec), indent=2, sort_keys=True))
    return 0


def _cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    model, _ = model_from_checkpoint(cfg, args.ckpt)
    data = dataset_for(cfg)
    split = getattr(data, args.split)
    by_id = {s.sample_id: s for s in split}
    for sid in args.ids:
        if sid not in by_id:
            raise ConfigError(f"sample id {sid} not in split {args.split!r}")
        s = by_id[sid]
        toks = generate_tokens(s.image_feats, s.instr_ids, model, args.max_new)
        print(json.dumps({
            "sample_id": sid,
            "instruction": [int(t) for t in s.instr_ids],
            "generated": toks,
            "answer_id": s.answer_id,
        }))
    return 0


def _cmd_grad_check(args) -> int:
    results, elapsed = gradcheck.run_scope(args.scope, seed=args.seed or 0)
    print(gradcheck.format_report(results))
    worst = max(results, key=lambda r: r.max_rel_err / r.tol)
    print(f"worst: {worst.name} at {worst.max_rel_err:.3e} (tol {worst.tol:.0e}); "
          f"{len(results)} checks in {elapsed:.1f}s")
    if any(not r.passed for r in results):
        print("gradient check FAILED", file=sys.stderr)
        return 2
    return 0


def _cmd_inspect_mask(args) -> int:
    cfg = _load_cfg(args)
    out = inspect_mask(cfg, args.ckpt, args.ids, args.out_file,
                       counterfactual=args.counterfactual)
    print(f"mask csv: {out}")
    if args.figure:
        fig = report.render_mask_heatmap(out, Path(out).with_suffix(".png"))
        print(f"figure: {fig}")
    return 0


def _cmd_ablate(args) -> int:
    base, seeds, cells, eval_limit = ablation.load_matrix(args.matrix)
    out = Path(args.out) if args.out else Path(base.out_dir) / "ablation"
    rows = ablation.run_ablation(base, seeds, cells, out, eval_limit=eval_limit)
    summary = ablation.write_summary(rows, out / "ablation_summary.csv")
    print(f"summary csv: {summary}")
    if not args.no_figures:
        fig = report.render_ablation_chart(summary, out / "ablation_summary.png")
        print(f"figure: {fig}")
    failures = [r for r in rows if r["error"]]
    for row in rows:
        print(f"{row['cell']:24s} seed={row['seed']} paired={row['paired_accuracy']} "
              f"acc={row['accuracy']} {row['error']}")
    return 1 if len(failures) == len(rows) else 0


def _cmd_synth_gen(args) -> int:
    cfg = _load_cfg(args)
    if args.seed is not None:
        # for dataset generation the seed of interest is the data seed
        cfg = dataclasses.replace(cfg, data_seed=args.seed)
    data = dataset_for(cfg)
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val", "test"):
        path = out / f"{split}.mods"
        write_split(path, cfg.task, cfg.data_seed, getattr(data, split))
        print(f"wrote {path}")
    return 0


def _cmd_report(args) -> int:
    rendered = report.render_run(args.run)
    if not rendered:
        raise ConfigError(f"nothing to render under {args.run}")
    for fig in rendered:
        print(f"figure: {fig}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moda",
        description="Instruction-conditioned visual-channel gating at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ckpt=False):
        p.add_argument("--config", type=Path, help="run config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="output directory override")
        if ckpt:
            p.add_argument("--ckpt", type=Path, required=True, help="checkpoint path")

    p = sub.add_parser("train-stage1", help="align the adapter (captions, LM frozen)")
    common(p)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="instruction-tune gate + LM + adapter")
    common(p, ckpt=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_train_stage2)

    p = sub.add_parser("eval", help="answer accuracy and paired accuracy")
    common(p, ckpt=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--limit", type=int, help="evaluate only the first N samples")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("generate", help="greedy decode selected samples")
    common(p, ckpt=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--ids", type=_id_list, default=[0], help="comma-separated sample ids")
    p.add_argument("--max-new", type=int, default=4)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--scope", default="all", choices=["ops", "blocks", "end2end", "all"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("inspect-mask", help="export gate values to CSV")
    common(p, ckpt=True)
    p.add_argument("--ids", type=_id_list, required=True, help="comma-separated sample ids")
    p.add_argument("--out-file", type=Path, required=True)
    p.add_argument("--counterfactual", action="store_true",
                   help="use each sample's paired alternate instruction")
    p.add_argument("--figure", action="store_true", help="render a heatmap next to the CSV")
    p.set_defaults(func=_cmd_inspect_mask)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    p.add_argument("--matrix", type=Path, required=True, help="matrix JSON")
    p.add_argument("--out", type=Path)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("synth-gen", help="write dataset splits to binary files")
    common(p)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("report", help="render figures for a finished run directory")
    p.add_argument("--run", type=Path, required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def _id_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericsError, GradCheckError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ModaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
