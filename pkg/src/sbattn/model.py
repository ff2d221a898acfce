"""Toy decoder-only transformer with swappable attention and a manual,
layer-by-layer backward pass.

Architecture: token embedding -> n_layer x (pre-LayerNorm attention residual,
pre-LayerNorm GELU MLP residual) -> final LayerNorm -> untied vocabulary
head. No biases on projections or MLP weights; LayerNorm carries gain+bias.

Attention variants (per head):
    sb                  stick-breaking, leftover mass dropped
    sb_remainder        leftover mass routed to the current value vector v_j
    sb_remainder_bias   leftover mass routed to a learned per-head vector r
    softmax             causal softmax with a PositionScheme (NoPE/RoPE/ALiBi)

Every parameter lives in a flat dict under a stable string path
("layers.0.attn.wq", "final_norm.g", ...) so gradients can be checked and
checkpoints serialized entry by entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.special

from .attention import (
    PositionScheme,
    alibi_slopes,
    sb_backward,
    sb_forward,
    softmax_attention,
    softmax_attention_backward,
)
from .blocked import (
    blocked_backward_fused,
    blocked_backward_twophase,
    blocked_forward,
    make_cache,
    plan_blocks,
)
from .numerics import Matrix, Rng

SB_VARIANTS = ("sb", "sb_remainder", "sb_remainder_bias")
VARIANTS = SB_VARIANTS + ("softmax",)
ATTN_IMPLS = ("reference", "blocked", "blocked_twophase")


@dataclass(frozen=True)
class AttentionConfig:
    n_head: int
    d_head: int
    variant: str = "sb"
    scheme: PositionScheme = field(default_factory=PositionScheme)
    group_norm: bool = False
    gn_eps: float = 1e-5
    impl: str = "reference"
    d_block: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.impl not in ATTN_IMPLS:
            raise ValueError(f"unknown attention impl {self.impl!r}")
        if self.variant in SB_VARIANTS and self.scheme.kind != "none":
            raise ValueError("stick-breaking variants use no position scheme")
        if self.variant == "softmax" and self.impl != "reference":
            raise ValueError("the blocked path only implements stick-breaking")

    @property
    def d_model(self) -> int:
        return self.n_head * self.d_head


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layer: int
    d_inter: int
    attn: AttentionConfig

    @property
    def d_model(self) -> int:
        return self.attn.d_model


def init_params(cfg: ModelConfig, rng: Rng, init_std: float = 0.02,
                dtype=np.float64) -> dict[str, np.ndarray]:
    """Fresh parameter dict. Projections normal(0, init_std); norms at
    identity; remainder vectors r start at zero so the variant is a no-op.
    dtype float32 makes the whole model compute in single precision: every
    activation and gradient buffer downstream is allocated zeros_like."""
    d, a = cfg.d_model, cfg.attn
    p: dict[str, np.ndarray] = {}
    p["embed"] = rng.normal(cfg.vocab_size, d, init_std)
    for i in range(cfg.n_layer):
        pre = f"layers.{i}"
        p[f"{pre}.ln1.g"] = np.ones(d)
        p[f"{pre}.ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{pre}.attn.{name}"] = rng.normal(d, d, init_std)
        if a.variant == "sb_remainder_bias":
            p[f"{pre}.attn.r"] = np.zeros((a.n_head, a.d_head))
        if a.group_norm:
            p[f"{pre}.attn.gn_g"] = np.ones((a.n_head, a.d_head))
            p[f"{pre}.attn.gn_b"] = np.zeros((a.n_head, a.d_head))
        p[f"{pre}.ln2.g"] = np.ones(d)
        p[f"{pre}.ln2.b"] = np.zeros(d)
        p[f"{pre}.mlp.w1"] = rng.normal(d, cfg.d_inter, init_std)
        p[f"{pre}.mlp.w2"] = rng.normal(cfg.d_inter, d, init_std)
    p["final_norm.g"] = np.ones(d)
    p["final_norm.b"] = np.zeros(d)
    p["head"] = rng.normal(d, cfg.vocab_size, init_std)
    if dtype is not np.float64:
        p = {k: m.astype(dtype) for k, m in p.items()}
    return p


# --- elementwise / normalization layers ---------------------------------


def layer_norm(x: Matrix, g: np.ndarray, b: np.ndarray, eps: float = 1e-5):
    # normalizes the trailing axis; rows here, but batched stacks work too
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(cache, d_y: Matrix):
    xhat, inv, g = cache
    d_xhat = d_y * g
    m1 = d_xhat.mean(axis=-1, keepdims=True)
    m2 = (d_xhat * xhat).mean(axis=-1, keepdims=True)
    d_x = inv * (d_xhat - m1 - xhat * m2)
    flat = tuple(range(d_y.ndim - 1))
    return d_x, (d_y * xhat).sum(axis=flat), d_y.sum(axis=flat)


def head_group_norm(o_head: Matrix, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> Matrix:
    """Zero-mean unit-variance per row over the head dimension, then scale
    and shift. A constant row maps to the bias (eps absorbs zero variance)."""
    y, _ = layer_norm(o_head, gain, bias, eps)
    return y


def gelu(x: Matrix):
    phi = 0.5 * (1.0 + scipy.special.erf(x / math.sqrt(2.0)))
    return x * phi, (x, phi)


def gelu_backward(cache, d_y: Matrix) -> Matrix:
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return d_y * (phi + x * pdf)


# --- attention sublayer --------------------------------------------------


def remainder_route(variant: str, v: Matrix, r_head) -> Matrix | None:
    """Where leftover stick mass is routed, as an L x d_head matrix: the
    current value row for sb_remainder, a learned per-head vector broadcast
    over positions for sb_remainder_bias, nowhere for plain sb."""
    if variant == "sb_remainder":
        return v
    if variant == "sb_remainder_bias":
        return np.broadcast_to(r_head[None, :], v.shape)
    return None


def _head_attention(q, k, v, cfg: AttentionConfig, r_head, slope):
    """Forward one head. Returns (o, head cache)."""
    hc: dict = {"v": v, "r_head": r_head}
    if cfg.variant == "softmax":
        o, ac = softmax_attention(q, k, v, cfg.scheme, alibi_slope=slope)
        hc.update(kind="softmax", ac=ac)
        return o, hc
    if cfg.impl == "reference":
        o, ac = sb_forward(q, k, v)
        rest = 1.0 - ac["a"].sum(axis=0)
        route = remainder_route(cfg.variant, v, r_head)
        if route is not None:
            o = o + rest[:, None] * route
        hc.update(kind="sb_ref", ac=ac, rest=rest)
        return o, hc
    # blocked path: the learned-bias variant runs the kernel on v - r, which
    # folds the leftover-mass term into a constant +r on the output
    layout = plan_blocks(q.shape[0], cfg.d_block)
    v_in = v - r_head[None, :] if cfg.variant == "sb_remainder_bias" else v
    o, acc, stats = blocked_forward(q, k, v_in, layout, two_phase=(cfg.impl == "blocked_twophase"))
    rest = np.exp(acc.a)
    if cfg.variant == "sb_remainder":
        o = o + rest[:, None] * v
    elif cfg.variant == "sb_remainder_bias":
        o = o + r_head[None, :]
    hc.update(kind="sb_blocked", ac=make_cache(q, k, v_in, layout, acc, stats), rest=rest)
    return o, hc


def _head_attention_backward(hc, cfg: AttentionConfig, d_o):
    """Backward one head. Returns (d_q, d_k, d_v, d_r or None)."""
    v = hc["v"]
    if hc["kind"] == "softmax":
        d_q, d_k, d_v = softmax_attention_backward(hc["ac"], d_o)
        return d_q, d_k, d_v, None
    rest = hc["rest"]
    d_r = None
    if hc["kind"] == "sb_ref":
        ac = hc["ac"]
        route = remainder_route(cfg.variant, v, hc.get("r_head"))
        if route is not None:
            # extra output term rest_j * route_j: every A entry of column j
            # sees -(route_j . d_o_j) through rest = 1 - sum(A)
            c = (route * d_o).sum(axis=1)
            ac = dict(ac, d_a_extra=np.broadcast_to(-c[None, :], ac["a"].shape))
        d_q, d_k, d_v = sb_backward(ac, d_o)
        if cfg.variant == "sb_remainder":
            d_v = d_v + rest[:, None] * d_o
        elif cfg.variant == "sb_remainder_bias":
            d_r = (rest[:, None] * d_o).sum(axis=0)
        return d_q, d_k, d_v, d_r
    cache = hc["ac"]
    backward = blocked_backward_fused if cfg.impl == "blocked" else _twophase3
    if cfg.variant == "sb_remainder":
        c = (v * d_o).sum(axis=1)
        d_q, d_k, d_v = backward(cache, d_o, row_offset=c)
        d_v = d_v + rest[:, None] * d_o
    elif cfg.variant == "sb_remainder_bias":
        d_q, d_k, d_v = backward(cache, d_o)
        d_r = d_o.sum(axis=0) - d_v.sum(axis=0)
    else:
        d_q, d_k, d_v = backward(cache, d_o)
    return d_q, d_k, d_v, d_r


def _twophase3(cache, d_o, row_offset=None):
    return blocked_backward_twophase(cache, d_o, row_offset=row_offset)[:3]


def mha_forward(x: Matrix, params: dict, cfg: AttentionConfig, prefix: str = "attn"):
    """Multi-head attention sublayer: project, per-head attention, optional
    remainder routing and head-wise norm, output projection."""
    if x.shape[1] != cfg.d_model:
        raise ValueError(f"x has width {x.shape[1]}, config wants {cfg.d_model}")
    wq, wk, wv, wo = (params[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    qq, kk, vv = x @ wq, x @ wk, x @ wv
    dh = cfg.d_head
    slopes = alibi_slopes(cfg.n_head) if cfg.scheme.kind == "alibi" else None
    heads = []
    concat = np.zeros_like(x)
    for h in range(cfg.n_head):
        sl = slice(h * dh, (h + 1) * dh)
        r_head = params[f"{prefix}.r"][h] if cfg.variant == "sb_remainder_bias" else None
        o_h, hc = _head_attention(
            qq[:, sl], kk[:, sl], vv[:, sl], cfg,
            r_head, slopes[h] if slopes is not None else None,
        )
        if cfg.group_norm:
            y_h, gn_cache = layer_norm(
                o_h, params[f"{prefix}.gn_g"][h], params[f"{prefix}.gn_b"][h], cfg.gn_eps
            )
            hc["gn"] = gn_cache
            o_h = y_h
        concat[:, sl] = o_h
        heads.append(hc)
    y = concat @ wo
    cache = {"x": x, "q": qq, "k": kk, "v": vv, "concat": concat, "heads": heads,
             "cfg": cfg, "prefix": prefix, "params": params}
    return y, cache


def mha_backward(cache: dict, d_y: Matrix):
    """Returns (d_x, grads) with grads keyed by the sublayer's param paths."""
    cfg: AttentionConfig = cache["cfg"]
    prefix, params = cache["prefix"], cache["params"]
    x, concat = cache["x"], cache["concat"]
    wq, wk, wv, wo = (params[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    grads = {f"{prefix}.wo": concat.T @ d_y}
    d_concat = d_y @ wo.T
    dh = cfg.d_head
    d_q = np.zeros_like(cache["q"])
    d_k = np.zeros_like(cache["k"])
    d_v = np.zeros_like(cache["v"])
    if cfg.variant == "sb_remainder_bias":
        grads[f"{prefix}.r"] = np.zeros_like(params[f"{prefix}.r"])
    if cfg.group_norm:
        grads[f"{prefix}.gn_g"] = np.zeros_like(params[f"{prefix}.gn_g"])
        grads[f"{prefix}.gn_b"] = np.zeros_like(params[f"{prefix}.gn_b"])
    for h in range(cfg.n_head):
        sl = slice(h * dh, (h + 1) * dh)
        hc = cache["heads"][h]
        d_oh = d_concat[:, sl]
        if cfg.group_norm:
            d_oh, dg, db = layer_norm_backward(hc["gn"], d_oh)
            grads[f"{prefix}.gn_g"][h] = dg
            grads[f"{prefix}.gn_b"][h] = db
        dq_h, dk_h, dv_h, dr_h = _head_attention_backward(hc, cfg, d_oh)
        d_q[:, sl], d_k[:, sl], d_v[:, sl] = dq_h, dk_h, dv_h
        if dr_h is not None:
            grads[f"{prefix}.r"][h] = dr_h
    grads[f"{prefix}.wq"] = x.T @ d_q
    grads[f"{prefix}.wk"] = x.T @ d_k
    grads[f"{prefix}.wv"] = x.T @ d_v
    d_x = d_q @ wq.T + d_k @ wk.T + d_v @ wv.T
    return d_x, grads


# --- full model ----------------------------------------------------------


def transformer_forward(tokens, params: dict, cfg: ModelConfig):
    """tokens (length-L int sequence) -> (logits L x V, cache)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError("tokens must be a 1-D id sequence")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab_size:
        raise ValueError("token id out of range")
    x = params["embed"][tokens]
    layer_caches = []
    for i in range(cfg.n_layer):
        pre = f"layers.{i}"
        h1, c_ln1 = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        attn_out, c_attn = mha_forward(h1, params, cfg.attn, prefix=f"{pre}.attn")
        x = x + attn_out
        h2, c_ln2 = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        u = h2 @ params[f"{pre}.mlp.w1"]
        act, c_gelu = gelu(u)
        x = x + act @ params[f"{pre}.mlp.w2"]
        layer_caches.append((c_ln1, c_attn, c_ln2, c_gelu, h2, act))
    xf, c_final = layer_norm(x, params["final_norm.g"], params["final_norm.b"])
    logits = xf @ params["head"]
    cache = {"tokens": tokens, "layers": layer_caches, "xf": xf, "c_final": c_final,
             "params": params, "cfg": cfg}
    return logits, cache


def transformer_backward(cache: dict, d_logits: Matrix) -> dict[str, np.ndarray]:
    """Gradients for every parameter path, embedding rows scattered by id."""
    params, cfg = cache["params"], cache["cfg"]
    tokens = cache["tokens"]
    grads: dict[str, np.ndarray] = {}
    grads["head"] = cache["xf"].T @ d_logits
    d_x, dg, db = layer_norm_backward(cache["c_final"], d_logits @ params["head"].T)
    grads["final_norm.g"], grads["final_norm.b"] = dg, db
    for i in reversed(range(cfg.n_layer)):
        pre = f"layers.{i}"
        c_ln1, c_attn, c_ln2, c_gelu, h2, act = cache["layers"][i]
        # MLP residual
        grads[f"{pre}.mlp.w2"] = act.T @ d_x
        d_act = d_x @ params[f"{pre}.mlp.w2"].T
        d_u = gelu_backward(c_gelu, d_act)
        grads[f"{pre}.mlp.w1"] = h2.T @ d_u
        d_h2 = d_u @ params[f"{pre}.mlp.w1"].T
        d_res, dg, db = layer_norm_backward(c_ln2, d_h2)
        grads[f"{pre}.ln2.g"], grads[f"{pre}.ln2.b"] = dg, db
        d_x = d_x + d_res
        # attention residual
        d_h1, attn_grads = mha_backward(c_attn, d_x)
        grads.update(attn_grads)
        d_res, dg, db = layer_norm_backward(c_ln1, d_h1)
        grads[f"{pre}.ln1.g"], grads[f"{pre}.ln1.b"] = dg, db
        d_x = d_x + d_res
    d_embed = np.zeros_like(params["embed"])
    np.add.at(d_embed, tokens, d_x)
    grads["embed"] = d_embed
    return grads


# --- checkpoint io -------------------------------------------------------


def save_params(params: dict[str, np.ndarray], path) -> None:
    """JSON map path -> {shape, row-major data}. Stable and diffable."""
    blob = {k: {"shape": list(m.shape), "data": np.asarray(m, dtype=np.float64).ravel().tolist()}
            for k, m in params.items()}
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        blob = json.load(fh)
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in blob.items()}
