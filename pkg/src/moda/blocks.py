"""Transformer building blocks: multi-head attention, FFN, pre-norm layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .optim import xavier_init
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    concat,  # noqa: F401  (re-exported for block consumers)
    gelu,
    layernorm,
    matmul,
    mul,
    reshape,
    softmax,
    swapaxes,
)

# Additive attention mask value: large enough that exp() underflows to
# exactly 0 after max-subtraction, while staying finite for the NaN guard.
_MASK_VALUE = -1e30


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


@dataclass
class MhaParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    n_heads: int

    @classmethod
    def init(cls, embed_dim: int, n_heads: int, rng: Rng, prefix: str) -> "MhaParams":
        if embed_dim % n_heads != 0:
            raise ConfigError(f"n_heads={n_heads} does not divide embed_dim={embed_dim}")
        e = embed_dim
        return cls(
            wq=xavier_init((e, e), rng.child(f"{prefix}.wq")),
            wk=xavier_init((e, e), rng.child(f"{prefix}.wk")),
            wv=xavier_init((e, e), rng.child(f"{prefix}.wv")),
            wo=xavier_init((e, e), rng.child(f"{prefix}.wo")),
            bq=_zeros(e),
            bk=_zeros(e),
            bv=_zeros(e),
            bo=_zeros(e),
            n_heads=n_heads,
        )

    def named(self, prefix: str):
        yield f"{prefix}.wq", self.wq
        yield f"{prefix}.wk", self.wk
        yield f"{prefix}.wv", self.wv
        yield f"{prefix}.wo", self.wo
        yield f"{prefix}.bq", self.bq
        yield f"{prefix}.bk", self.bk
        yield f"{prefix}.bv", self.bv
        yield f"{prefix}.bo", self.bo


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, embed_dim: int, ffn_mult: int, rng: Rng, prefix: str) -> "FfnParams":
        hidden = ffn_mult * embed_dim
        if hidden < embed_dim:
            raise ConfigError(f"ffn hidden width {hidden} < embed_dim {embed_dim}")
        return cls(
            w1=xavier_init((embed_dim, hidden), rng.child(f"{prefix}.w1")),
            b1=_zeros(hidden),
            w2=xavier_init((hidden, embed_dim), rng.child(f"{prefix}.w2")),
            b2=_zeros(embed_dim),
        )

    def named(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, embed_dim: int) -> "LayerNormParams":
        return cls(gain=_ones(embed_dim), bias=_zeros(embed_dim))

    def named(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


@dataclass
class TransformerLayerParams:
    attn: MhaParams
    ffn: FfnParams
    ln1: LayerNormParams
    ln2: LayerNormParams

    @classmethod
    def init(cls, embed_dim: int, n_heads: int, ffn_mult: int, rng: Rng,
             prefix: str) -> "TransformerLayerParams":
        return cls(
            attn=MhaParams.init(embed_dim, n_heads, rng, f"{prefix}.attn"),
            ffn=FfnParams.init(embed_dim, ffn_mult, rng, f"{prefix}.ffn"),
            ln1=LayerNormParams.init(embed_dim),
            ln2=LayerNormParams.init(embed_dim),
        )

    def named(self, prefix: str):
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.ffn.named(f"{prefix}.ffn")
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.ln2.named(f"{prefix}.ln2")


def _dropout(x: Tensor, rate: float, rng: Rng | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


def mha_forward(q_in: Tensor, kv_in: Tensor, params: MhaParams, causal: bool = False,
                dropout: float = 0.0, drop_rng: Rng | None = None) -> Tensor:
    """Scaled dot-product attention over heads; [B,Nq,E] x [B,Nk,E] -> [B,Nq,E]."""
    e = params.wq.shape[0]
    if q_in.shape[-1] != e or kv_in.shape[-1] != e:
        raise ShapeError(
            f"attention width mismatch: inputs {q_in.shape}/{kv_in.shape} vs params E={e}"
        )
    h = params.n_heads
    if e % h != 0:
        raise ConfigError(f"n_heads={h} does not divide embed_dim={e}")
    hd = e // h
    b, nq, _ = q_in.shape
    nk = kv_in.shape[1]

    def split_heads(x: Tensor, n: int) -> Tensor:
        return swapaxes(reshape(x, (b, n, h, hd)), 1, 2)  # [B,H,n,hd]

    q = split_heads(add(matmul(q_in, params.wq), params.bq), nq)
    k = split_heads(add(matmul(kv_in, params.wk), params.bk), nk)
    v = split_heads(add(matmul(kv_in, params.wv), params.bv), nk)

    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(hd))  # [B,H,Nq,Nk]
    if causal:
        if nq != nk:
            raise ShapeError(f"causal attention needs square scores, got {nq}x{nk}")
        tri = np.triu(np.full((nq, nk), _MASK_VALUE), k=1)
        scores = add(scores, Tensor(tri))
    attn = softmax(scores, axis=-1)
    attn = _dropout(attn, dropout, drop_rng.child("attn") if drop_rng else None)
    ctx = matmul(attn, v)  # [B,H,Nq,hd]
    merged = reshape(swapaxes(ctx, 1, 2), (b, nq, e))
    return add(matmul(merged, params.wo), params.bo)


def transformer_layer_forward(x: Tensor, params: TransformerLayerParams,
                              memory: Tensor | None = None, causal: bool = False,
                              dropout: float = 0.0,
                              drop_rng: Rng | None = None) -> Tensor:
    """Pre-norm layer: x + MHA(LN(x), memory or LN(x)); then x + FFN(LN(x))."""
    normed = layernorm(x, params.ln1.gain, params.ln1.bias)
    kv = normed if memory is None else memory
    x = add(x, mha_forward(normed, kv, params.attn, causal=causal,
                           dropout=dropout, drop_rng=drop_rng))
    hidden = gelu(add(matmul(layernorm(x, params.ln2.gain, params.ln2.bias), params.ffn.w1),
                      params.ffn.b1))
    hidden = _dropout(hidden, dropout, drop_rng.child("ffn") if drop_rng else None)
    return add(x, add(matmul(hidden, params.ffn.w2), params.ffn.b2))


def cross_attn_layer_forward(target: Tensor, memory: Tensor,
                             params: TransformerLayerParams, dropout: float = 0.0,
                             drop_rng: Rng | None = None) -> Tensor:
    return transformer_layer_forward(target, params, memory=memory, causal=False,
                                     dropout=dropout, drop_rng=drop_rng)


def decoder_block_forward(x: Tensor, params: TransformerLayerParams, dropout: float = 0.0,
                          drop_rng: Rng | None = None) -> Tensor:
    return transformer_layer_forward(x, params, memory=None, causal=True,
                                     dropout=dropout, drop_rng=drop_rng)
