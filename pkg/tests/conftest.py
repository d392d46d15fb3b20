import dataclasses

import pytest

from moda.adapter import ModaConfig
from moda.config import OptimConfig, RunConfig
from moda.data import TaskSpec
from moda.model import ModelDims

TINY_DIMS = ModelDims(embed_dim=16, vision_dim=8, n_visual=4, vocab=32, n_blocks=2,
                      n_heads=2, ffn_mult=2, max_seq=24)
TINY_TASK = TaskSpec(n_tokens=4, n_groups=2, channels_per_group=4, n_values=2,
                     noise_std=0.05, code_seed=0)
TINY_MODA = ModaConfig(variant="cross_attention", n_layers=1, n_heads=2, ffn_mult=2)


def tiny_config(out_dir: str, **overrides) -> RunConfig:
    """A seconds-scale run config for harness integration tests."""
    cfg = RunConfig(
        dims=TINY_DIMS,
        moda=TINY_MODA,
        task=TINY_TASK,
        optim=OptimConfig(stage1_lr=1e-2, stage2_lr=1e-2, warmup_frac=0.03,
                          steps_stage1=12, steps_stage2=12, batch_stage1=8,
                          batch_stage2=8, eval_every=6, eval_samples=16),
        sizes=(120, 40, 40),
        seed=0,
        data_seed=0,
        out_dir=out_dir,
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


@pytest.fixture
def tiny_cfg(tmp_path):
    return tiny_config(str(tmp_path / "run"))
