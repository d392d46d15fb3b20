"""Independent numpy reference implementations used as test oracles.

These intentionally avoid moda.tensor so they exercise a separate code
path from the implementation they verify.
"""

import numpy as np
from scipy.special import erf


def layernorm_np(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def gelu_np(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def sigmoid_np(x):
    return 1.0 / (1.0 + np.exp(-x))


def mha_np(q_in, kv_in, p, causal=False):
    """Per-head loop attention; p is a blocks.MhaParams."""
    e = p.wq.shape[0]
    h = p.n_heads
    hd = e // h
    b, nq, _ = q_in.shape
    nk = kv_in.shape[1]
    q = q_in @ p.wq.data + p.bq.data
    k = kv_in @ p.wk.data + p.bk.data
    v = kv_in @ p.wv.data + p.bv.data
    out = np.zeros((b, nq, e))
    for bi in range(b):
        for head in range(h):
            sl = slice(head * hd, (head + 1) * hd)
            scores = q[bi, :, sl] @ k[bi, :, sl].T / np.sqrt(hd)
            if causal:
                scores = np.where(np.triu(np.ones((nq, nk)), k=1) > 0, -np.inf, scores)
            scores = scores - scores.max(axis=-1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(axis=-1, keepdims=True)
            out[bi, :, sl] = attn @ v[bi, :, sl]
    return out @ p.wo.data + p.bo.data


def transformer_layer_np(x, p, memory=None, causal=False):
    """Pre-norm layer matching blocks.transformer_layer_forward; p is a
    blocks.TransformerLayerParams."""
    h = layernorm_np(x, p.ln1.gain.data, p.ln1.bias.data)
    kv = h if memory is None else memory
    x = x + mha_np(h, kv, p.attn, causal=causal)
    hidden = gelu_np(layernorm_np(x, p.ln2.gain.data, p.ln2.bias.data) @ p.ffn.w1.data
                     + p.ffn.b1.data)
    return x + hidden @ p.ffn.w2.data + p.ffn.b2.data


def self_attn_concat_mask_np(v, t, params):
    """Reference for the concatenate-then-truncate gate variant; params is
    an adapter.ModaParams holding self-attention layers."""
    h = np.concatenate([v, t], axis=1)
    for layer in params.layers:
        h = transformer_layer_np(h, layer)
    h = h[:, :v.shape[1]]
    return sigmoid_np(h @ params.proj_w.data + params.proj_b.data)
