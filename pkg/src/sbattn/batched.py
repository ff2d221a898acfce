"""Batch-stacked transformer forward/backward for the training loop.

The per-sequence model in model.py is the semantic reference; this module
repeats its math with a leading batch axis so one step of SGD is a handful
of large BLAS calls instead of thousands of small ones. Tests pin the two
paths together to 1e-10 on logits and every parameter gradient.

Shapes: tokens (B, L); activations (B, L, d); attention scores (B, L, L)
in query-row orientation (entry [b, j, i] scores key i for query j).
"""

from __future__ import annotations

import numpy as np

from .attention import alibi_slopes, rope_rotate
from .model import AttentionConfig, ModelConfig, gelu, gelu_backward, layer_norm, layer_norm_backward
from .numerics import sigmoid, softplus_stable


def _lower_strict(length: int) -> np.ndarray:
    return np.tri(length, length, -1, dtype=bool)


def _lower_incl(length: int) -> np.ndarray:
    return np.tri(length, length, 0, dtype=bool)


def _sb_weights(z: np.ndarray):
    """Stick-breaking weights over keys for every query row: A[b, j, i] =
    sigmoid(z[j,i]) * prod_{i<k<j}(1 - sigmoid(z[j,k])), computed in log
    space with an inclusive reverse cumulative sum of softplus terms."""
    length = z.shape[1]
    mask = _lower_strict(length)
    sp = np.where(mask, softplus_stable(np.where(mask, z, 0.0)), 0.0)
    cum = np.flip(np.cumsum(np.flip(sp, axis=2), axis=2), axis=2)
    a = np.where(mask, np.exp(np.where(mask, z - cum, -np.inf)), 0.0)
    return a, sp


def _sb_head(q, k, v, variant, r_head):
    scale = 1.0 / np.sqrt(q.shape[-1])
    z = np.matmul(q, k.transpose(0, 2, 1)) * scale
    a, sp = _sb_weights(z)
    o = np.matmul(a, v)
    rest = None
    if variant != "sb":
        rest = 1.0 - a.sum(axis=2)
        route = v if variant == "sb_remainder" else np.broadcast_to(r_head, v.shape)
        o = o + rest[:, :, None] * route
    return o, {"z": z, "a": a, "q": q, "k": k, "v": v, "scale": scale,
               "rest": rest, "r_head": r_head, "variant": variant}


def _sb_head_backward(hc, d_o):
    z, a, q, k, v = hc["z"], hc["a"], hc["q"], hc["k"], hc["v"]
    variant, rest = hc["variant"], hc["rest"]
    length = z.shape[1]
    mask = _lower_strict(length)
    d_w = np.matmul(d_o, v.transpose(0, 2, 1))
    d_r = None
    if variant != "sb":
        route = v if variant == "sb_remainder" else np.broadcast_to(hc["r_head"], v.shape)
        # leftover-mass term rest_j * route_j: every weight in row j sees
        # -(route_j . d_o_j) through rest = 1 - sum(A)
        c = (route * d_o).sum(axis=2)
        d_w = d_w - c[:, :, None]
        if variant == "sb_remainder_bias":
            d_r = (rest[:, :, None] * d_o).sum(axis=(0, 1))
    d_at = d_w * a
    cum = np.cumsum(d_at, axis=2)
    sig = sigmoid(np.where(mask, z, 0.0))
    d_z = np.where(mask, d_at - sig * cum, 0.0) * hc["scale"]
    d_q = np.matmul(d_z, k)
    d_k = np.matmul(d_z.transpose(0, 2, 1), q)
    d_v = np.matmul(a.transpose(0, 2, 1), d_o)
    if variant == "sb_remainder":
        d_v = d_v + rest[:, :, None] * d_o
    return d_q, d_k, d_v, d_r


def _softmax_head(q, k, v, scheme, slope):
    scale = 1.0 / np.sqrt(q.shape[-1])
    qr, kr = q, k
    if scheme.kind == "rope":
        qr = np.stack([rope_rotate(q[b], scheme) for b in range(q.shape[0])])
        kr = np.stack([rope_rotate(k[b], scheme) for b in range(k.shape[0])])
    z = np.matmul(qr, kr.transpose(0, 2, 1)) * scale
    length = z.shape[1]
    valid = _lower_incl(length)
    if scheme.window is not None:
        j = np.arange(length)
        valid = valid & ((j[:, None] - j[None, :]) < scheme.window)
    if scheme.kind == "alibi":
        j = np.arange(length)
        z = z - slope * np.maximum(j[:, None] - j[None, :], 0)
    z = np.where(valid, z, -np.inf)
    w = np.exp(z - z.max(axis=2, keepdims=True))
    w = np.where(valid, w, 0.0)
    w /= w.sum(axis=2, keepdims=True)
    o = np.matmul(w, v)
    return o, {"w": w, "qr": qr, "kr": kr, "v": v, "scale": scale, "scheme": scheme}


def _softmax_head_backward(hc, d_o):
    w, qr, kr, v = hc["w"], hc["qr"], hc["kr"], hc["v"]
    scheme = hc["scheme"]
    d_w = np.matmul(d_o, v.transpose(0, 2, 1))
    d_z = w * (d_w - (w * d_w).sum(axis=2, keepdims=True))
    d_z *= hc["scale"]
    d_qr = np.matmul(d_z, kr)
    d_kr = np.matmul(d_z.transpose(0, 2, 1), qr)
    d_v = np.matmul(w.transpose(0, 2, 1), d_o)
    if scheme.kind == "rope":
        d_qr = np.stack([rope_rotate(d_qr[b], scheme, inverse=True) for b in range(d_qr.shape[0])])
        d_kr = np.stack([rope_rotate(d_kr[b], scheme, inverse=True) for b in range(d_kr.shape[0])])
    return d_qr, d_kr, d_v


def _mha_batch(x, params, cfg: AttentionConfig, prefix: str):
    wq, wk, wv, wo = (params[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    qq, kk, vv = x @ wq, x @ wk, x @ wv
    dh = cfg.d_head
    slopes = alibi_slopes(cfg.n_head) if cfg.scheme.kind == "alibi" else None
    concat = np.zeros_like(x)
    heads = []
    for h in range(cfg.n_head):
        sl = slice(h * dh, (h + 1) * dh)
        q, k, v = qq[..., sl], kk[..., sl], vv[..., sl]
        if cfg.variant == "softmax":
            o, hc = _softmax_head(q, k, v, cfg.scheme,
                                  slopes[h] if slopes is not None else None)
        else:
            r_head = params[f"{prefix}.r"][h] if cfg.variant == "sb_remainder_bias" else None
            o, hc = _sb_head(q, k, v, cfg.variant, r_head)
        if cfg.group_norm:
            o, hc_gn = layer_norm(o, params[f"{prefix}.gn_g"][h],
                                  params[f"{prefix}.gn_b"][h], cfg.gn_eps)
            hc = {"inner": hc, "gn": hc_gn}
        concat[..., sl] = o
        heads.append(hc)
    y = concat @ wo
    return y, {"x": x, "concat": concat, "heads": heads, "cfg": cfg,
               "prefix": prefix, "params": params}


def _mha_batch_backward(cache, d_y):
    cfg: AttentionConfig = cache["cfg"]
    prefix, params = cache["prefix"], cache["params"]
    x, concat = cache["x"], cache["concat"]
    wq, wk, wv, wo = (params[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    grads = {f"{prefix}.wo": np.tensordot(concat, d_y, axes=([0, 1], [0, 1]))}
    d_concat = d_y @ wo.T
    dh = cfg.d_head
    d_q = np.zeros_like(x)
    d_k = np.zeros_like(x)
    d_v = np.zeros_like(x)
    if cfg.variant == "sb_remainder_bias":
        grads[f"{prefix}.r"] = np.zeros_like(params[f"{prefix}.r"])
    if cfg.group_norm:
        grads[f"{prefix}.gn_g"] = np.zeros_like(params[f"{prefix}.gn_g"])
        grads[f"{prefix}.gn_b"] = np.zeros_like(params[f"{prefix}.gn_b"])
    for h in range(cfg.n_head):
        sl = slice(h * dh, (h + 1) * dh)
        hc = cache["heads"][h]
        d_oh = d_concat[..., sl]
        if cfg.group_norm:
            d_oh, dg, db = layer_norm_backward(hc["gn"], d_oh)
            grads[f"{prefix}.gn_g"][h] = dg
            grads[f"{prefix}.gn_b"][h] = db
            hc = hc["inner"]
        if cfg.variant == "softmax":
            dq_h, dk_h, dv_h = _softmax_head_backward(hc, d_oh)
        else:
            dq_h, dk_h, dv_h, dr_h = _sb_head_backward(hc, d_oh)
            if dr_h is not None:
                grads[f"{prefix}.r"][h] = dr_h
        d_q[..., sl], d_k[..., sl], d_v[..., sl] = dq_h, dk_h, dv_h
    grads[f"{prefix}.wq"] = np.tensordot(x, d_q, axes=([0, 1], [0, 1]))
    grads[f"{prefix}.wk"] = np.tensordot(x, d_k, axes=([0, 1], [0, 1]))
    grads[f"{prefix}.wv"] = np.tensordot(x, d_v, axes=([0, 1], [0, 1]))
    d_x = d_q @ wq.T + d_k @ wk.T + d_v @ wv.T
    return d_x, grads


def forward_batch(tokens, params: dict, cfg: ModelConfig):
    """tokens (B, L) -> (logits (B, L, V), cache). Same math as the
    per-sequence transformer_forward, reference attention path only."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError("tokens must be (batch, length)")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab_size:
        raise ValueError("token id out of range")
    if cfg.attn.impl != "reference":
        raise ValueError("batched path implements the reference attention only")
    x = params["embed"][tokens]
    layer_caches = []
    for i in range(cfg.n_layer):
        pre = f"layers.{i}"
        h1, c_ln1 = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        attn_out, c_attn = _mha_batch(h1, params, cfg.attn, prefix=f"{pre}.attn")
        x = x + attn_out
        h2, c_ln2 = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        u = h2 @ params[f"{pre}.mlp.w1"]
        act, c_gelu = gelu(u)
        x = x + act @ params[f"{pre}.mlp.w2"]
        layer_caches.append((c_ln1, c_attn, c_ln2, c_gelu, h2, act))
    xf, c_final = layer_norm(x, params["final_norm.g"], params["final_norm.b"])
    logits = xf @ params["head"]
    return logits, {"tokens": tokens, "layers": layer_caches, "xf": xf,
                    "c_final": c_final, "params": params, "cfg": cfg}


def backward_batch(cache: dict, d_logits) -> dict:
    params, cfg = cache["params"], cache["cfg"]
    grads: dict[str, np.ndarray] = {}
    grads["head"] = np.tensordot(cache["xf"], d_logits, axes=([0, 1], [0, 1]))
    d_x, dg, db = layer_norm_backward(cache["c_final"], d_logits @ params["head"].T)
    grads["final_norm.g"], grads["final_norm.b"] = dg, db
    for i in reversed(range(cfg.n_layer)):
        pre = f"layers.{i}"
        c_ln1, c_attn, c_ln2, c_gelu, h2, act = cache["layers"][i]
        grads[f"{pre}.mlp.w2"] = np.tensordot(act, d_x, axes=([0, 1], [0, 1]))
        d_act = d_x @ params[f"{pre}.mlp.w2"].T
        d_u = gelu_backward(c_gelu, d_act)
        grads[f"{pre}.mlp.w1"] = np.tensordot(h2, d_u, axes=([0, 1], [0, 1]))
        d_h2 = d_u @ params[f"{pre}.mlp.w1"].T
        d_res, dg, db = layer_norm_backward(c_ln2, d_h2)
        grads[f"{pre}.ln2.g"], grads[f"{pre}.ln2.b"] = dg, db
        d_x = d_x + d_res
        d_h1, attn_grads = _mha_batch_backward(c_attn, d_x)
        grads.update(attn_grads)
        d_res, dg, db = layer_norm_backward(c_ln1, d_h1)
        grads[f"{pre}.ln1.g"], grads[f"{pre}.ln1.b"] = dg, db
        d_x = d_x + d_res
    d_embed = np.zeros_like(params["embed"])
    np.add.at(d_embed, cache["tokens"].reshape(-1), d_x.reshape(-1, d_x.shape[-1]))
    grads["embed"] = d_embed
    return grads


def logits_batch(tokens, params: dict, cfg: ModelConfig):
    """Forward only, cache discarded."""
    return forward_batch(tokens, params, cfg)[0]
