"""Finite-difference verification of every registered gradient.

Three scopes: per-op fuzz cases, composed blocks, and an end-to-end pass
through a micro-sized model. Analytic gradients must match central
differences (h = 1e-6) within 1e-6 relative error per op/block and 1e-5
end to end, where the error is |analytic - numeric| / max(1, |numeric|).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import adapter, blocks, tensor
from .errors import GradCheckError
from .rng import Rng
from .tensor import DIFFERENTIABLE_OPS, Tensor

H = 1e-6
OP_TOL = 1e-6
BLOCK_TOL = 1e-6
END2END_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar f() w.r.t. x, mutated in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_leaves(loss_builder, leaves: dict[str, Tensor], h: float = H) -> float:
    """Worst relative error over all leaves.

    `loss_builder` must rebuild the graph from the given leaf tensors on
    every call (their .data arrays are perturbed in place between calls).
    """
    for t in leaves.values():
        t.grad = None
    loss_builder().backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in leaves.items()
    }
    worst = 0.0
    for name, t in leaves.items():
        numeric = numeric_grad(lambda: float(loss_builder().data), t.data, h)
        worst = max(worst, rel_err(analytic[name], numeric))
    return worst


def _as_leaves(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def _weighted_sum(t: Tensor, rng: Rng) -> Tensor:
    """Reduce to a scalar through fixed random weights so upstream
    gradients differ per coordinate."""
    w = Tensor(rng.child("loss_weights").normal(t.shape))
    return tensor.sum_all(tensor.mul(t, w))


def _op_cases(rng: Rng):
    r = rng.child("ops")
    a34 = r.child("a34").normal((3, 4))
    b4 = r.child("b4").normal((4,))
    b34 = r.child("b34").normal((3, 4))
    c32 = r.child("c32").normal((3, 2))
    m_a = r.child("ma").normal((2, 3, 4))
    m_b = r.child("mb").normal((4, 5))
    x35 = r.child("x35").normal((3, 5))
    ln_x = r.child("lnx").normal((4, 6))
    ln_g = r.child("lng").normal((6,)) + 1.0
    ln_b = r.child("lnb").normal((6,))
    ce = r.child("ce").normal((5, 7))
    targets = np.array([0, 3, 6, -1, 2])
    table = r.child("table").normal((7, 4))
    ids = np.array([[0, 2, 5], [5, 1, 1]])
    return {
        "add": (lambda t: _weighted_sum(tensor.add(t["a"], t["b"]), r),
                {"a": a34, "b": b4}),
        "sub": (lambda t: _weighted_sum(tensor.sub(t["a"], t["b"]), r),
                {"a": a34, "b": b4}),
        "mul": (lambda t: _weighted_sum(tensor.mul(t["a"], t["b"]), r),
                {"a": a34, "b": b34}),
        "matmul": (lambda t: _weighted_sum(tensor.matmul(t["a"], t["b"]), r),
                   {"a": m_a, "b": m_b}),
        "sigmoid": (lambda t: _weighted_sum(tensor.sigmoid(t["x"]), r), {"x": a34}),
        "gelu": (lambda t: _weighted_sum(tensor.gelu(t["x"]), r), {"x": a34}),
        "softmax": (lambda t: _weighted_sum(tensor.softmax(t["x"], axis=-1), r),
                    {"x": x35}),
        "layernorm": (lambda t: _weighted_sum(
            tensor.layernorm(t["x"], t["gain"], t["bias"]), r),
            {"x": ln_x, "gain": ln_g, "bias": ln_b}),
        "cross_entropy_logits": (
            lambda t: tensor.mul(tensor.cross_entropy_logits(t["x"], targets), 1.7),
            {"x": ce}),
        "reshape": (lambda t: _weighted_sum(tensor.reshape(t["x"], (2, 6)), r),
                    {"x": a34}),
        "swapaxes": (lambda t: _weighted_sum(tensor.swapaxes(t["x"], 0, 2), r),
                     {"x": m_a}),
        "concat": (lambda t: _weighted_sum(
            tensor.concat([t["a"], t["b"], t["c"]], axis=1), r),
            {"a": a34, "b": b34, "c": c32}),
        "slice_axis": (lambda t: _weighted_sum(tensor.slice_axis(t["x"], 1, 1, 3), r),
                       {"x": a34}),
        "embedding": (lambda t: _weighted_sum(tensor.embedding(t["table"], ids), r),
                      {"table": table}),
        "mean_abs": (lambda t: tensor.mul(tensor.mean_abs(t["x"]), 1.7), {"x": a34}),
        "sum_all": (lambda t: tensor.mul(tensor.sum_all(t["x"]), 1.7), {"x": a34}),
        "mean_all": (lambda t: tensor.mul(tensor.mean_all(t["x"]), 1.7), {"x": a34}),
    }


def op_coverage(seed: int = 0) -> list[str]:
    """Registered differentiable ops that the checker has no case for."""
    cases = _op_cases(Rng(seed, "gradcheck"))
    return sorted(set(DIFFERENTIABLE_OPS) - set(cases))


def run_op_checks(seed: int = 0, tol: float = OP_TOL) -> list[CheckResult]:
    rng = Rng(seed, "gradcheck")
    missing = op_coverage(seed)
    if missing:
        raise GradCheckError(f"no finite-difference case for registered ops: {missing}")
    results = []
    for name, (build, arrays) in sorted(_op_cases(rng).items()):
        leaves = _as_leaves(arrays)
        results.append(CheckResult(name, check_leaves(lambda: build(leaves), leaves), tol))
    return results


def _mha_case(rng: Rng, causal: bool):
    r = rng.child("mha_causal" if causal else "mha_cross")
    e, heads = 8, 2
    nq, nk = (3, 3) if causal else (3, 4)
    params = blocks.MhaParams.init(e, heads, r, "attn")
    leaves = {name: t for name, t in params.named("attn")}
    leaves["q_in"] = Tensor(r.child("q").normal((2, nq, e)))
    if not causal:
        leaves["kv_in"] = Tensor(r.child("kv").normal((2, nk, e)))
    for t in leaves.values():
        t.requires_grad = True

    def build():
        kv = leaves["q_in"] if causal else leaves["kv_in"]
        return _weighted_sum(blocks.mha_forward(leaves["q_in"], kv, params, causal=causal), r)

    return build, leaves


def _layer_case(rng: Rng, kind: str):
    r = rng.child(f"layer_{kind}")
    e = 8
    params = blocks.TransformerLayerParams.init(e, 2, 2, r, "layer")
    leaves = {name: t for name, t in params.named("layer")}
    leaves["x"] = Tensor(r.child("x").normal((2, 3, e)))
    if kind == "cross":
        leaves["memory"] = Tensor(r.child("mem").normal((2, 4, e)))
    for t in leaves.values():
        t.requires_grad = True

    def build():
        if kind == "cross":
            return _weighted_sum(
                blocks.cross_attn_layer_forward(leaves["x"], leaves["memory"], params), r)
        return _weighted_sum(blocks.decoder_block_forward(leaves["x"], params), r)

    return build, leaves


def _moda_case(rng: Rng, variant: str):
    r = rng.child(f"moda_{variant}")
    e = 8
    cfg = adapter.ModaConfig(variant=variant, n_layers=1, n_heads=2, ffn_mult=2)
    params = adapter.ModaParams.init(cfg, e, r, "moda")
    leaves = {name: t for name, t in params.named("moda")}
    leaves["v"] = Tensor(r.child("v").normal((2, 3, e)))
    if variant != adapter.VARIANT_MLP_VISUAL_ONLY:
        leaves["t"] = Tensor(r.child("t").normal((2, 2, e)))
    for t in leaves.values():
        t.requires_grad = True

    def build():
        out, mask = adapter.moda_forward(leaves["v"], leaves.get("t"), params, cfg)
        # exercise the gate path (and the L1 penalty) alongside the output
        return tensor.add(_weighted_sum(out, r), adapter.l1_mask_penalty(mask, 0.5))

    return build, leaves


def _l1_logits_case(rng: Rng):
    r = rng.child("l1_logits")
    e = 6
    cfg = adapter.ModaConfig(variant=adapter.VARIANT_MLP_VISUAL_ONLY, n_layers=2, n_heads=1)
    params = adapter.ModaParams.init(cfg, e, r, "moda")
    leaves = {name: t for name, t in params.named("moda")}
    leaves["v"] = Tensor(r.child("v").normal((1, 2, e)))
    for t in leaves.values():
        t.requires_grad = True

    def build():
        mask = adapter.compute_mask(leaves["v"], None, params, cfg)
        return adapter.l1_mask_penalty(mask, 0.7, on_logits=True)

    return build, leaves


def run_block_checks(seed: int = 0, tol: float = BLOCK_TOL) -> list[CheckResult]:
    rng = Rng(seed, "gradcheck")
    cases = {
        "mha_cross": _mha_case(rng, causal=False),
        "mha_causal": _mha_case(rng, causal=True),
        "cross_attn_layer": _layer_case(rng, "cross"),
        "decoder_block": _layer_case(rng, "decoder"),
        "moda_cross_attention": _moda_case(rng, adapter.VARIANT_CROSS_ATTENTION),
        "moda_mlp_visual_only": _moda_case(rng, adapter.VARIANT_MLP_VISUAL_ONLY),
        "moda_self_attn_concat": _moda_case(rng, adapter.VARIANT_SELF_ATTN_CONCAT),
        "l1_penalty_on_logits": _l1_logits_case(rng),
    }
    return [CheckResult(name, check_leaves(build, leaves), tol)
            for name, (build, leaves) in sorted(cases.items())]


def run_end2end_check(seed: int = 0, tol: float = END2END_TOL) -> list[CheckResult]:
    """Full training-loss gradient on a micro model, every trainable leaf."""
    from . import model as model_mod

    dims = model_mod.ModelDims(embed_dim=8, vision_dim=6, n_visual=2, vocab=12,
                               n_blocks=1, n_heads=2, ffn_mult=2, max_seq=12)
    cfg = adapter.ModaConfig(variant=adapter.VARIANT_CROSS_ATTENTION, n_layers=1,
                             n_heads=2, ffn_mult=2, aux_l1=0.01)
    model = model_mod.MLLMModel.build(dims, cfg, Rng(seed, "gradcheck/model"))
    model.set_stage(2)

    rng = Rng(seed, "gradcheck/end2end")
    feats = rng.child("feats").normal((2, dims.n_visual, dims.vision_dim))
    instr = np.array([[2, 3], [2, 4]])
    targets = np.array([[5, 0], [6, 1]])  # second row ends in a padded slot
    batch = model_mod.Batch(image_feats=feats, instr_ids=instr, target_ids=targets)

    leaves = model.trainable_params()

    def build():
        loss, _ = model_mod.forward_train(batch, model)
        return loss

    return [CheckResult("end2end_micro_model", check_leaves(build, leaves), tol)]


def run_scope(scope: str, seed: int = 0) -> tuple[list[CheckResult], float]:
    start = time.monotonic()
    if scope == "ops":
        results = run_op_checks(seed)
    elif scope == "blocks":
        results = run_block_checks(seed)
    elif scope == "end2end":
        results = run_end2end_check(seed)
    elif scope == "all":
        results = run_op_checks(seed) + run_block_checks(seed) + run_end2end_check(seed)
    else:
        raise GradCheckError(f"unknown scope {scope!r}")
    return results, time.monotonic() - start


def format_report(results: list[CheckResult]) -> str:
    lines = []
    for res in results:
        status = "ok" if res.passed else "FAIL"
        lines.append(
            f"{status:4s} {res.name:28s} max_rel_err={res.max_rel_err:.3e} tol={res.tol:.0e}"
        )
    return "\n".join(lines)
