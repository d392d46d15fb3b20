"""Run configuration: strict JSON schema, lossless round-trip, stable hash."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .adapter import ModaConfig
from .data import TaskSpec
from .errors import ConfigError
from .model import ModelDims


@dataclass
class OptimConfig:
    stage1_lr: float = 1e-3
    stage2_lr: float = 2e-5
    warmup_frac: float = 0.03
    steps_stage1: int = 2000
    steps_stage2: int = 2000
    batch_stage1: int = 64
    batch_stage2: int = 32
    weight_decay: float = 0.0
    eval_every: int = 200
    eval_samples: int = 256

    def validate(self) -> None:
        if self.steps_stage1 < 1 or self.steps_stage2 < 1:
            raise ConfigError("step budgets must be positive")
        if self.batch_stage1 < 1 or self.batch_stage2 < 1:
            raise ConfigError("batch sizes must be positive")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")


@dataclass
class RunConfig:
    dims: ModelDims = field(default_factory=ModelDims)
    moda: ModaConfig = field(default_factory=ModaConfig)
    use_moda: bool = True
    task: TaskSpec = field(default_factory=TaskSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sizes: tuple[int, int, int] = (8000, 1000, 1000)
    seed: int = 0
    data_seed: int = 0
    out_dir: str = "runs/default"

    def validate(self) -> None:
        self.dims.validate()
        self.optim.validate()
        self.task.validate(self.dims.vocab)
        if self.use_moda:
            self.moda.validate(self.dims.embed_dim)
        if self.task.vision_dim != self.dims.vision_dim:
            raise ConfigError(
                f"task vision width {self.task.vision_dim} != model vision_dim "
                f"{self.dims.vision_dim}"
            )
        if len(self.sizes) != 3:
            raise ConfigError("sizes must be (train, val, test)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sizes"] = list(self.sizes)
        return d

    def canonical_json(self) -> bytes:
        # out_dir is a runtime artifact location; it must not affect
        # checkpoint compatibility or run identity
        d = self.to_dict()
        d.pop("out_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()

    def config_hash(self) -> int:
        return zlib.crc32(self.canonical_json())


def _from_dict(cls, payload, path: str):
    """Build a flat dataclass from a dict, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected an object, got {type(payload).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return cls(**payload)


def config_from_dict(payload: dict) -> RunConfig:
    nested = {"dims": ModelDims, "moda": ModaConfig, "task": TaskSpec, "optim": OptimConfig}
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(payload) - fields)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    kwargs = {}
    for name, value in payload.items():
        if name in nested:
            kwargs[name] = _from_dict(nested[name], value, name)
        elif name == "sizes":
            if not (isinstance(value, (list, tuple)) and len(value) == 3):
                raise ConfigError("sizes must be a 3-element list")
            kwargs[name] = tuple(int(v) for v in value)
        else:
            kwargs[name] = value
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config payload: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
