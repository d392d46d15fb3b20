"""Toy LLaVA-style pipeline: frozen vision stub -> adapter -> gate -> causal LM.

The decoder consumes [visual prefix; instruction tokens; answer tokens].
Visual tokens carry no positional embeddings; text positions are counted
from the start of the instruction so the instruction embeddings fed to
the gate do not depend on the visual prefix length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import (
    PLACEMENT_ALL_LAYERS,
    PLACEMENT_BEGINNING,
    ModaConfig,
    ModaParams,
    ModulationMask,
    l1_mask_penalty,
    moda_forward,
    modulate,
)
from .blocks import LayerNormParams, TransformerLayerParams, decoder_block_forward
from .errors import ConfigError, InputError
from .optim import xavier_init
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    concat,
    cross_entropy_logits,
    embedding,
    layernorm,
    matmul,
    mul,
    no_grad,
    reshape,
    slice_axis,
)

EOS_ID = 0
PAD_ID = 1

# The output head starts at a fraction of Xavier scale so the initial
# next-token distribution is near uniform (loss ~ ln V at step 0).
_HEAD_INIT_SCALE = 0.25


@dataclass
class ModelDims:
    embed_dim: int = 64
    vision_dim: int = 48
    n_visual: int = 16
    vocab: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq: int = 64
    dropout: float = 0.0

    def validate(self) -> None:
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"decoder n_heads={self.n_heads} does not divide embed_dim={self.embed_dim}"
            )
        if self.vocab <= 2:
            raise ConfigError("vocab must leave room beyond the EOS/PAD ids")
        for name in ("embed_dim", "vision_dim", "n_visual", "n_blocks", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class Batch:
    image_feats: np.ndarray  # [B, N, E_v] float64
    instr_ids: np.ndarray  # [B, M] int
    target_ids: np.ndarray  # [B, L] int; PAD_ID positions are ignored by the loss


@dataclass
class VisionStub:
    """Frozen stand-in for a pretrained patch encoder.

    Like the encoders it replaces, its output is position-aware: a fixed
    per-token signature is added on top of the projected patch features.
    Without it no downstream component could tell visual tokens apart
    (the LM deliberately adds no positional embeddings to the prefix).
    """

    proj: Tensor  # [E_v, E_v], frozen for the model's whole life
    pos_sig: Tensor  # [N, E_v], frozen per-token signature

    @classmethod
    def init(cls, vision_dim: int, n_visual: int, rng: Rng) -> "VisionStub":
        # orthogonal so the frozen encoder never destroys task information
        gauss = rng.child("vision_stub.proj").normal((vision_dim, vision_dim))
        q, r = np.linalg.qr(gauss)
        q = q * np.sign(np.diagonal(r))
        sig = rng.child("vision_stub.pos_sig").normal((n_visual, vision_dim), std=0.5)
        return cls(proj=Tensor(q), pos_sig=Tensor(sig))

    def forward(self, image_feats: np.ndarray) -> Tensor:
        return add(matmul(Tensor(image_feats), self.proj), self.pos_sig)

    def named(self):
        yield "vision_stub.proj", self.proj
        yield "vision_stub.pos_sig", self.pos_sig


@dataclass
class AdapterParams:
    w: Tensor  # [E_v, E]
    b: Tensor  # [E]

    @classmethod
    def init(cls, vision_dim: int, embed_dim: int, rng: Rng) -> "AdapterParams":
        return cls(
            w=xavier_init((vision_dim, embed_dim), rng.child("adapter.w")),
            b=Tensor(np.zeros(embed_dim)),
        )

    def named(self):
        yield "adapter.w", self.w
        yield "adapter.b", self.b


@dataclass
class ToyLM:
    tok_emb: Tensor  # [V, E]
    pos_emb: Tensor  # [S_max, E], text positions only
    blocks: list[TransformerLayerParams]
    final_ln: LayerNormParams
    head_w: Tensor  # [E, V], untied from tok_emb
    head_b: Tensor  # [V]

    @classmethod
    def init(cls, dims: ModelDims, rng: Rng) -> "ToyLM":
        e, v = dims.embed_dim, dims.vocab
        head = xavier_init((e, v), rng.child("lm.head.w"))
        head.data *= _HEAD_INIT_SCALE
        return cls(
            tok_emb=xavier_init((v, e), rng.child("lm.tok_emb")),
            pos_emb=xavier_init((dims.max_seq, e), rng.child("lm.pos_emb")),
            blocks=[
                TransformerLayerParams.init(e, dims.n_heads, dims.ffn_mult, rng,
                                            f"lm.block{d}")
                for d in range(dims.n_blocks)
            ],
            final_ln=LayerNormParams.init(e),
            head_w=head,
            head_b=Tensor(np.zeros(v)),
        )

    def named(self):
        yield "lm.tok_emb", self.tok_emb
        yield "lm.pos_emb", self.pos_emb
        for d, block in enumerate(self.blocks):
            yield from block.named(f"lm.block{d}")
        yield from self.final_ln.named("lm.final_ln")
        yield "lm.head.w", self.head_w
        yield "lm.head.b", self.head_b


@dataclass
class MLLMModel:
    dims: ModelDims
    stub: VisionStub
    adapter: AdapterParams
    lm: ToyLM
    moda_cfg: ModaConfig | None = None
    moda: list[ModaParams] = field(default_factory=list)
    stage: int = 0

    @classmethod
    def build(cls, dims: ModelDims, moda_cfg: ModaConfig | None, rng: Rng) -> "MLLMModel":
        dims.validate()
        moda = []
        if moda_cfg is not None:
            moda_cfg.validate(dims.embed_dim)
            if moda_cfg.placement == PLACEMENT_BEGINNING or moda_cfg.share_across_blocks:
                moda = [ModaParams.init(moda_cfg, dims.embed_dim, rng, "moda")]
            else:
                moda = [
                    ModaParams.init(moda_cfg, dims.embed_dim, rng, f"moda.b{d}")
                    for d in range(dims.n_blocks)
                ]
        return cls(
            dims=dims,
            stub=VisionStub.init(dims.vision_dim, dims.n_visual, rng),
            adapter=AdapterParams.init(dims.vision_dim, dims.embed_dim, rng),
            lm=ToyLM.init(dims, rng),
            moda_cfg=moda_cfg,
            moda=moda,
        )

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, t in self.stub.named():
            out[name] = t
        for name, t in self.adapter.named():
            out[name] = t
        for name, t in self.lm.named():
            out[name] = t
        if self.moda_cfg is not None:
            if len(self.moda) == 1:
                out.update(self.moda[0].named("moda"))
            else:
                for d, inst in enumerate(self.moda):
                    out.update(inst.named(f"moda.b{d}"))
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_params().items() if t.requires_grad}

    def set_stage(self, stage: int) -> None:
        """Stage 1 trains only the adapter; stage 2 trains adapter + LM +
        gate. The vision stub is frozen in every stage."""
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        self.stage = stage
        for name, t in self.named_params().items():
            if name.startswith("vision_stub."):
                t.requires_grad = False
            elif name.startswith("adapter."):
                t.requires_grad = True
            else:
                t.requires_grad = stage == 2
        # leftover gradients from a previous stage must not leak
        for t in self.named_params().values():
            t.grad = None

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, t in params.items():
            if state[name].shape != t.data.shape:
                raise ConfigError(
                    f"shape mismatch for {name}: {state[name].shape} vs {t.data.shape}"
                )
            t.data = state[name].astype(np.float64).copy()


def embed_instruction(instr_ids: np.ndarray, lm: ToyLM) -> Tensor:
    """Token + positional embeddings; positions start at 0 at the first
    instruction token."""
    instr_ids = np.asarray(instr_ids)
    m = instr_ids.shape[-1]
    tok = embedding(lm.tok_emb, instr_ids)
    pos = embedding(lm.pos_emb, np.arange(m))
    return add(tok, pos)


def _embed_text(ids: np.ndarray, lm: ToyLM, offset: int) -> Tensor:
    ids = np.asarray(ids)
    length = ids.shape[-1]
    tok = embedding(lm.tok_emb, ids)
    pos = embedding(lm.pos_emb, np.arange(offset, offset + length))
    return add(tok, pos)


def _apply_moda(model: MLLMModel, v: Tensor, t_instr: Tensor,
                mask_override: float | None, instance: int,
                drop_rng: Rng | None) -> tuple[Tensor, ModulationMask | Tensor]:
    if mask_override is not None:
        mask = Tensor(np.full(v.shape, float(mask_override)))
        return modulate(v, mask), mask
    inst = model.moda[instance]
    rng = drop_rng.child(f"moda{instance}") if drop_rng else None
    return moda_forward(v, t_instr, inst, model.moda_cfg, drop_rng=rng)


def sequence_logits(model: MLLMModel, image_feats: np.ndarray, instr_ids: np.ndarray,
                    target_ids: np.ndarray | None = None,
                    mask_override: float | None = None,
                    drop_rng: Rng | None = None) -> tuple[Tensor, list]:
    """Run the full pipeline; returns ([B, N+M+L, V] logits, gate masks)."""
    dims = model.dims
    b, n, _ = image_feats.shape
    m = instr_ids.shape[1]
    l = target_ids.shape[1] if target_ids is not None else 0
    if n != dims.n_visual:
        raise InputError(f"expected {dims.n_visual} visual tokens, got {n}")
    if n + m + l > dims.max_seq or m + l > dims.max_seq:
        raise InputError(f"sequence length {n + m + l} exceeds max_seq {dims.max_seq}")

    v = matmul(model.stub.forward(image_feats), model.adapter.w)
    v = add(v, model.adapter.b)
    t_instr = embed_instruction(instr_ids, model.lm)

    masks: list = []
    use_moda = model.moda_cfg is not None or mask_override is not None
    beginning = mask_override is not None or (
        model.moda_cfg is not None and model.moda_cfg.placement == PLACEMENT_BEGINNING
    )
    if use_moda and beginning:
        v, mask = _apply_moda(model, v, t_instr, mask_override, 0, drop_rng)
        masks.append(mask)

    parts = [v, t_instr]
    if target_ids is not None:
        parts.append(_embed_text(target_ids, model.lm, offset=m))
    x = concat(parts, axis=1)

    all_layers = (mask_override is None and model.moda_cfg is not None
                  and model.moda_cfg.placement == PLACEMENT_ALL_LAYERS)
    for d, block in enumerate(model.lm.blocks):
        if all_layers:
            instance = 0 if model.moda_cfg.share_across_blocks else d
            vis = slice_axis(x, 1, 0, n)
            rest = slice_axis(x, 1, n, x.shape[1])
            vis, mask = _apply_moda(model, vis, t_instr, None, instance, drop_rng)
            masks.append(mask)
            x = concat([vis, rest], axis=1)
        rng = drop_rng.child(f"block{d}") if drop_rng else None
        x = decoder_block_forward(x, block, dropout=dims.dropout, drop_rng=rng)

    h = layernorm(x, model.lm.final_ln.gain, model.lm.final_ln.bias)
    logits = add(matmul(h, model.lm.head_w), model.lm.head_b)
    return logits, masks


def forward_train(batch: Batch, model: MLLMModel, mask_override: float | None = None,
                  drop_rng: Rng | None = None) -> tuple[Tensor, list]:
    """Teacher-forced loss over the answer positions (+ optional L1 term)."""
    b, n = batch.image_feats.shape[0], batch.image_feats.shape[1]
    m, l = batch.instr_ids.shape[1], batch.target_ids.shape[1]
    logits, masks = sequence_logits(model, batch.image_feats, batch.instr_ids,
                                    batch.target_ids, mask_override, drop_rng)
    pred = slice_axis(logits, 1, n + m - 1, n + m + l - 1)  # predicts each target slot
    flat = reshape(pred, (b * l, model.dims.vocab))
    loss = cross_entropy_logits(flat, batch.target_ids.reshape(-1), ignore_index=PAD_ID)

    cfg = model.moda_cfg
    if (cfg is not None and cfg.aux_l1 is not None and masks
            and mask_override is None):
        penalty = l1_mask_penalty(masks[0], cfg.aux_l1, on_logits=cfg.l1_on_logits)
        for mask in masks[1:]:
            penalty = add(penalty, l1_mask_penalty(mask, cfg.aux_l1, on_logits=cfg.l1_on_logits))
        loss = add(loss, mul(penalty, 1.0 / len(masks)))
    return loss, masks


def generate_batch(model: MLLMModel, image_feats: np.ndarray, instr_ids: np.ndarray,
                   max_new_tokens: int, mask_override: float | None = None) -> np.ndarray:
    """Greedy decode; returns [B, <=max_new_tokens] ids, PAD after each EOS."""
    b = image_feats.shape[0]
    n, m = image_feats.shape[1], instr_ids.shape[1]
    out = np.full((b, max_new_tokens), PAD_ID, dtype=np.int64)
    finished = np.zeros(b, dtype=bool)
    with no_grad():
        logits, _ = sequence_logits(model, image_feats, instr_ids, None, mask_override)
        steps = 0
        generated = np.zeros((b, 0), dtype=np.int64)
        while steps < max_new_tokens:
            next_ids = np.argmax(logits.data[:, -1, :], axis=-1)
            next_ids[finished] = PAD_ID
            out[:, steps] = next_ids
            finished |= next_ids == EOS_ID
            steps += 1
            if finished.all() or steps == max_new_tokens:
                break
            if n + m + steps > model.dims.max_seq:
                break  # context budget reached
            generated = np.concatenate([generated, next_ids[:, None]], axis=1)
            logits, _ = sequence_logits(model, image_feats, instr_ids, generated,
                                        mask_override)
    return out[:, :steps]


def generate(image_feats: np.ndarray, instr_ids: np.ndarray, model: MLLMModel,
             max_new_tokens: int) -> list[int]:
    """Greedy decode of one sample; stops after emitting EOS or at budget."""
    ids = generate_batch(model, image_feats[None], np.asarray(instr_ids)[None],
                         max_new_tokens)[0]
    toks: list[int] = []
    for t in ids:
        toks.append(int(t))
        if t == EOS_ID:
            break
    return toks
