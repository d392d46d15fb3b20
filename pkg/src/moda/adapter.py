"""Instruction-conditioned channel-wise gating of aligned visual tokens.

Three interchangeable ways to produce the gate: a cross-attention stack
over (visual queries, instruction memory), a visual-only MLP, and a
self-attention stack over the concatenated sequence. All of them end in
the same linear projection + sigmoid, so the gate always lands strictly
inside (0, 1) and multiplies the visual features channel by channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .blocks import (
    TransformerLayerParams,
    cross_attn_layer_forward,
    transformer_layer_forward,
)
from .errors import ConfigError, ShapeError
from .optim import xavier_init
from .rng import Rng
from .tensor import Tensor, add, concat, gelu, matmul, mean_abs, mul, sigmoid, slice_axis

VARIANT_CROSS_ATTENTION = "cross_attention"
VARIANT_MLP_VISUAL_ONLY = "mlp_visual_only"
VARIANT_SELF_ATTN_CONCAT = "self_attn_concat"
VARIANTS = (VARIANT_CROSS_ATTENTION, VARIANT_MLP_VISUAL_ONLY, VARIANT_SELF_ATTN_CONCAT)

PLACEMENT_BEGINNING = "beginning"
PLACEMENT_ALL_LAYERS = "all_layers"
PLACEMENTS = (PLACEMENT_BEGINNING, PLACEMENT_ALL_LAYERS)

# Bias offset for the optional gate-open initialisation; sigmoid(6) ~ 0.9975.
_GATE_OPEN_BIAS = 6.0


@dataclass
class ModaConfig:
    variant: str = VARIANT_CROSS_ATTENTION
    n_layers: int = 2
    n_heads: int = 16
    ffn_mult: int = 4
    aux_l1: float | None = None  # weight of the L1 gate penalty; None disables it
    l1_on_logits: bool = False  # penalize pre-sigmoid logits instead of the gate
    placement: str = PLACEMENT_BEGINNING
    gate_open_init: bool = False  # start with gates ~1 instead of ~0.5
    share_across_blocks: bool = False  # all_layers: reuse one parameter set
    dropout: float = 0.0

    def __post_init__(self):
        # a zero-weight penalty is the same run as no penalty at all
        if self.aux_l1 is not None and self.aux_l1 == 0.0:
            self.aux_l1 = None

    def validate(self, embed_dim: int) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.placement!r}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be positive, got {self.n_layers}")
        if self.variant != VARIANT_MLP_VISUAL_ONLY and embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"n_heads={self.n_heads} does not divide embed_dim={embed_dim}"
            )
        if self.aux_l1 is not None and self.aux_l1 < 0.0:
            raise ConfigError("aux_l1 must be > 0 when the L1 penalty is enabled")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class ModulationMask:
    """Per-token, per-channel gate in (0, 1), shape [B, N, E]."""

    values: Tensor
    logits: Tensor  # pre-sigmoid, kept for the optional logit-space penalty


@dataclass
class ModaParams:
    layers: list[TransformerLayerParams] = field(default_factory=list)
    mlp: list[tuple[Tensor, Tensor]] = field(default_factory=list)  # (weight, bias) pairs
    proj_w: Tensor | None = None
    proj_b: Tensor | None = None

    @classmethod
    def init(cls, cfg: ModaConfig, embed_dim: int, rng: Rng, prefix: str = "moda") -> "ModaParams":
        cfg.validate(embed_dim)
        params = cls()
        if cfg.variant == VARIANT_MLP_VISUAL_ONLY:
            for i in range(cfg.n_layers):
                w = xavier_init((embed_dim, embed_dim), rng.child(f"{prefix}.mlp{i}.w"))
                b = Tensor([0.0] * embed_dim)
                params.mlp.append((w, b))
        else:
            for i in range(cfg.n_layers):
                params.layers.append(
                    TransformerLayerParams.init(
                        embed_dim, cfg.n_heads, cfg.ffn_mult, rng, f"{prefix}.layer{i}"
                    )
                )
        params.proj_w = xavier_init((embed_dim, embed_dim), rng.child(f"{prefix}.proj.w"))
        bias = [_GATE_OPEN_BIAS if cfg.gate_open_init else 0.0] * embed_dim
        params.proj_b = Tensor(bias)
        return params

    def named(self, prefix: str = "moda"):
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layer{i}")
        for i, (w, b) in enumerate(self.mlp):
            yield f"{prefix}.mlp{i}.w", w
            yield f"{prefix}.mlp{i}.b", b
        yield f"{prefix}.proj.w", self.proj_w
        yield f"{prefix}.proj.b", self.proj_b


def _trunk(v_aligned: Tensor, t_embed: Tensor | None, params: ModaParams,
           cfg: ModaConfig, drop_rng: Rng | None) -> Tensor:
    if cfg.variant == VARIANT_MLP_VISUAL_ONLY:
        if params.mlp == [] or params.layers:
            raise ConfigError("params populated for a different variant than the config")
        h = v_aligned
        for i, (w, b) in enumerate(params.mlp):
            h = add(matmul(h, w), b)
            if i < len(params.mlp) - 1:
                h = gelu(h)
        return h

    if not params.layers or params.mlp:
        raise ConfigError("params populated for a different variant than the config")
    if t_embed is None:
        raise ShapeError(f"variant {cfg.variant!r} requires instruction embeddings")
    if t_embed.shape[-1] != v_aligned.shape[-1]:
        raise ShapeError(
            f"embedding widths differ: visual {v_aligned.shape} vs text {t_embed.shape}"
        )

    if cfg.variant == VARIANT_CROSS_ATTENTION:
        h = v_aligned
        for i, layer in enumerate(params.layers):
            h = cross_attn_layer_forward(
                h, t_embed, layer, dropout=cfg.dropout,
                drop_rng=drop_rng.child(f"layer{i}") if drop_rng else None,
            )
        return h

    # self_attn_concat: run the stack over [visual; instruction], then keep
    # only the visual positions.
    n = v_aligned.shape[1]
    h = concat([v_aligned, t_embed], axis=1)
    for i, layer in enumerate(params.layers):
        h = transformer_layer_forward(
            h, layer, memory=None, causal=False, dropout=cfg.dropout,
            drop_rng=drop_rng.child(f"layer{i}") if drop_rng else None,
        )
    return slice_axis(h, 1, 0, n)


def compute_mask(v_aligned: Tensor, t_embed: Tensor | None, params: ModaParams,
                 cfg: ModaConfig, drop_rng: Rng | None = None) -> ModulationMask:
    """Gate in (0,1) per (token, channel): sigmoid(trunk(V, T) @ W + b)."""
    features = _trunk(v_aligned, t_embed, params, cfg, drop_rng)
    logits = add(matmul(features, params.proj_w), params.proj_b)
    return ModulationMask(values=sigmoid(logits), logits=logits)


def modulate(v_aligned: Tensor, mask: ModulationMask | Tensor) -> Tensor:
    """Channel-wise product; gradients flow to both operands."""
    values = mask.values if isinstance(mask, ModulationMask) else mask
    if values.shape != v_aligned.shape:
        raise ShapeError(f"mask shape {values.shape} != features shape {v_aligned.shape}")
    return mul(v_aligned, values)


def moda_forward(v_aligned: Tensor, t_embed: Tensor | None, params: ModaParams,
                 cfg: ModaConfig, drop_rng: Rng | None = None) -> tuple[Tensor, ModulationMask]:
    mask = compute_mask(v_aligned, t_embed, params, cfg, drop_rng)
    return modulate(v_aligned, mask), mask


def l1_mask_penalty(mask: ModulationMask, weight: float, on_logits: bool = False) -> Tensor:
    """weight x mean |gate| (or |pre-sigmoid logits| behind the flag)."""
    if weight < 0.0:
        raise ConfigError(f"l1 weight must be >= 0, got {weight}")
    target = mask.logits if on_logits else mask.values
    return mul(mean_abs(target), float(weight))


def param_count(cfg: ModaConfig, embed_dim: int) -> int:
    """Exact trainable parameter count of one adapter instance."""
    cfg.validate(embed_dim)
    e = embed_dim
    proj = e * e + e
    if cfg.variant == VARIANT_MLP_VISUAL_ONLY:
        return cfg.n_layers * (e * e + e) + proj
    hidden = cfg.ffn_mult * e
    mha = 4 * (e * e + e)
    ffn = e * hidden + hidden + hidden * e + e
    norms = 4 * e  # two LayerNorms, gain + bias each
    return cfg.n_layers * (mha + ffn + norms) + proj
