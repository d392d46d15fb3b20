"""Synthetic instruction-conditioned channel-selection task.

Each image is N tokens of K·C channels; group g of token n carries one of
A orthonormal code vectors (plus Gaussian noise). The instruction names a
(group, token) pair and the answer is that attribute's value token, so a
brute-force nearest-code decoder is an exact oracle for the labels.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InputError
from .model import EOS_ID
from .rng import Rng

QUERY_ID = 2
CAPTION_ID = 3
_RESERVED = 4  # EOS, PAD, QUERY, CAPTION

_MAGIC = b"MODS"
_VERSION = 1


@dataclass
class TaskSpec:
    n_tokens: int = 16
    n_groups: int = 4
    channels_per_group: int = 12
    n_values: int = 4
    noise_std: float = 0.1
    code_seed: int = 0  # fixes the per-group code vectors

    @property
    def vision_dim(self) -> int:
        return self.n_groups * self.channels_per_group

    def validate(self, vocab: int) -> None:
        if self.n_groups < 1 or self.n_tokens < 1 or self.n_values < 2:
            raise ConfigError("task needs >=1 group, >=1 token, >=2 values")
        if self.channels_per_group < self.n_values:
            raise ConfigError(
                f"channels_per_group={self.channels_per_group} cannot hold "
                f"{self.n_values} orthonormal codes"
            )
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if _RESERVED + self.n_groups + self.n_tokens + self.n_values > vocab:
            raise ConfigError(
                f"vocab {vocab} too small for task tokens "
                f"({_RESERVED}+{self.n_groups}+{self.n_tokens}+{self.n_values})"
            )

    # vocab layout: [EOS, PAD, QUERY, CAPTION, groups..., indices..., values...]
    def group_token(self, g: int) -> int:
        return _RESERVED + g

    def index_token(self, n: int) -> int:
        return _RESERVED + self.n_groups + n

    def value_token(self, a: int) -> int:
        return _RESERVED + self.n_groups + self.n_tokens + a

    def parse_instruction(self, instr_ids) -> tuple[int, int]:
        instr_ids = [int(t) for t in instr_ids]
        if len(instr_ids) != 3 or instr_ids[0] != QUERY_ID:
            raise InputError(f"malformed instruction {instr_ids}")
        g = instr_ids[1] - _RESERVED
        n = instr_ids[2] - _RESERVED - self.n_groups
        if not (0 <= g < self.n_groups and 0 <= n < self.n_tokens):
            raise InputError(f"instruction names unknown group/token: {instr_ids}")
        return g, n

    def canonical_json(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode()

    def spec_hash(self) -> int:
        return zlib.crc32(self.canonical_json())


@dataclass
class Sample:
    sample_id: int
    image_feats: np.ndarray  # [N, E_v] float64
    instr_ids: np.ndarray  # [3] int
    answer_id: int
    group: int
    token: int
    value: int
    values: np.ndarray  # [N, K] int, full attribute grid


@dataclass
class DatasetSplit:
    spec: TaskSpec
    seed: int
    spec_hash: int
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


def codebooks(spec: TaskSpec) -> np.ndarray:
    """[K, A, C]: per group, A orthonormal unit code vectors."""
    k, a, c = spec.n_groups, spec.n_values, spec.channels_per_group
    codes = np.empty((k, a, c))
    root = Rng(spec.code_seed, "task-codes")
    for g in range(k):
        gauss = root.child(g).normal((c, a))
        q, r = np.linalg.qr(gauss)
        codes[g] = (q * np.sign(np.diagonal(r))).T
    return codes


def _make_sample(spec: TaskSpec, codes: np.ndarray, seed: int, sample_id: int) -> Sample:
    k, a, n_tok, c = spec.n_groups, spec.n_values, spec.n_tokens, spec.channels_per_group
    r = Rng(seed, f"sample/{sample_id}")
    values = r.child("values").integers(0, a, (n_tok, k))
    q = r.child("query")
    g = q.integers(0, k)
    n = q.integers(0, n_tok)
    feats = np.empty((n_tok, spec.vision_dim))
    for gi in range(k):
        feats[:, gi * c:(gi + 1) * c] = codes[gi][values[:, gi]]
    if spec.noise_std > 0:
        feats = feats + r.child("noise").normal((n_tok, spec.vision_dim), spec.noise_std)
    return Sample(
        sample_id=sample_id,
        image_feats=feats,
        instr_ids=np.array([QUERY_ID, spec.group_token(g), spec.index_token(n)]),
        answer_id=spec.value_token(int(values[n, g])),
        group=g,
        token=n,
        value=int(values[n, g]),
        values=values.astype(np.int64),
    )


def gen_dataset(spec: TaskSpec, seed: int,
                sizes: tuple[int, int, int] = (8000, 1000, 1000)) -> DatasetSplit:
    """Deterministic splits, disjoint by sample id (train, then val, then test)."""
    if any(s < 0 for s in sizes):
        raise ConfigError(f"negative split size in {sizes}")
    total = sum(sizes)
    log_space = (spec.n_tokens * spec.n_groups * np.log(spec.n_values)
                 + np.log(spec.n_groups * spec.n_tokens))
    if spec.noise_std == 0 and total > 0 and np.log(total) > log_space:
        raise ConfigError(f"requested {total} samples exceeds the unique-sample space")
    codes = codebooks(spec)
    samples = [_make_sample(spec, codes, seed, i) for i in range(total)]
    n_train, n_val = sizes[0], sizes[1]
    return DatasetSplit(
        spec=spec,
        seed=seed,
        spec_hash=spec.spec_hash(),
        train=samples[:n_train],
        val=samples[n_train:n_train + n_val],
        test=samples[n_train + n_val:],
    )


def oracle_answer(sample: Sample, spec: TaskSpec) -> int:
    """Brute force: decode (g, n) from the instruction, nearest code on the
    g-th channel group of token n."""
    g, n = spec.parse_instruction(sample.instr_ids)
    c = spec.channels_per_group
    block = sample.image_feats[n, g * c:(g + 1) * c]
    codes = codebooks(spec)[g]
    dists = np.sum((codes - block) ** 2, axis=1)
    return spec.value_token(int(np.argmin(dists)))


def counterfactual_pair(sample: Sample, spec: TaskSpec) -> tuple[Sample, Sample]:
    """Two queries about the same image: the original and a different group
    on the same token. Both must be answered for the paired metric."""
    if spec.n_groups < 2:
        raise ConfigError("counterfactual pairs need at least 2 attribute groups")
    r = Rng(spec.code_seed, f"pair/{sample.sample_id}")
    g2 = (sample.group + 1 + r.integers(0, spec.n_groups - 1)) % spec.n_groups
    partner = Sample(
        sample_id=sample.sample_id,
        image_feats=sample.image_feats,
        instr_ids=np.array(
            [QUERY_ID, spec.group_token(g2), spec.index_token(sample.token)]
        ),
        answer_id=spec.value_token(int(sample.values[sample.token, g2])),
        group=g2,
        token=sample.token,
        value=int(sample.values[sample.token, g2]),
        values=sample.values,
    )
    return sample, partner


def caption_ids(sample: Sample, spec: TaskSpec) -> np.ndarray:
    """Canonical description: the K attribute value tokens of token 0, then EOS."""
    vals = [spec.value_token(int(v)) for v in sample.values[0]]
    return np.array(vals + [EOS_ID])


def caption_batch(samples: list[Sample], spec: TaskSpec):
    """(image_feats, instr_ids, target_ids) arrays for the stage-1 surrogate."""
    feats = np.stack([s.image_feats for s in samples])
    instr = np.full((len(samples), 1), CAPTION_ID, dtype=np.int64)
    targets = np.stack([caption_ids(s, spec) for s in samples])
    return feats, instr, targets


def query_batch(samples: list[Sample], spec: TaskSpec):
    """(image_feats, instr_ids, target_ids) arrays for instruction tuning."""
    feats = np.stack([s.image_feats for s in samples])
    instr = np.stack([s.instr_ids for s in samples])
    targets = np.array([[s.answer_id, EOS_ID] for s in samples], dtype=np.int64)
    return feats, instr, targets


# ---------------------------------------------------------------------------
# Binary split files: MODS header, then fixed-width little-endian records.

def _record_format(spec: TaskSpec) -> struct.Struct:
    n, k, ev = spec.n_tokens, spec.n_groups, spec.vision_dim
    return struct.Struct(f"<QHHHH3H{n * k}B{n * ev}d")


def write_split(path, spec: TaskSpec, seed: int, samples: list[Sample]) -> None:
    rec = _record_format(spec)
    blob = spec.canonical_json()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQI", _VERSION, seed & (2**64 - 1), len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(samples)))
        for s in samples:
            fh.write(rec.pack(
                s.sample_id, s.group, s.token, s.value, s.answer_id,
                *(int(t) for t in s.instr_ids),
                *(int(v) for v in s.values.reshape(-1)),
                *s.image_feats.reshape(-1),
            ))


def read_split(path) -> tuple[TaskSpec, int, list[Sample]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise InputError(f"bad dataset magic {magic!r} in {path}")
        version, seed, blob_len = struct.unpack("<IQI", fh.read(16))
        if version != _VERSION:
            raise InputError(f"unsupported dataset version {version}")
        spec = TaskSpec(**json.loads(fh.read(blob_len)))
        (count,) = struct.unpack("<Q", fh.read(8))
        rec = _record_format(spec)
        n, k = spec.n_tokens, spec.n_groups
        samples = []
        for _ in range(count):
            fields = rec.unpack(fh.read(rec.size))
            sample_id, group, token, value, answer = fields[:5]
            instr = np.array(fields[5:8])
            values = np.array(fields[8:8 + n * k], dtype=np.int64).reshape(n, k)
            feats = np.array(fields[8 + n * k:]).reshape(n, spec.vision_dim)
            samples.append(Sample(
                sample_id=sample_id, image_feats=feats, instr_ids=instr,
                answer_id=answer, group=group, token=token, value=value,
                values=values,
            ))
    return spec, seed, samples
