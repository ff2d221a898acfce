"""O(L^2) reference attention: stick-breaking in direct and log-space forms
with analytic backward, variant outputs (remainder routing, recurrent scan),
and causal softmax baselines with rotary / ALiBi position schemes.

Convention for all score-shaped L x L matrices here: entry (i, j) pairs key
position i with query position j, so the strictly-causal region is the upper
triangle i < j. Query j's weights live in column j and sum to at most 1; the
shortfall is the remaining stick mass that the remainder variants route to
v_j or to a learned per-head vector.

Stick-breaking weights:  A[i, j] = sigma(z[i, j]) * prod_{i < k < j} (1 - sigma(z[k, j]))
Log-space form:          A[i, j] = exp(z[i, j] - sum_{k = i..j-1} softplus(z[k, j]))
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Matrix, sigmoid, softplus_stable

VALID_SCHEME_KINDS = ("none", "rope", "alibi")


@dataclass(frozen=True)
class PositionScheme:
    """Position handling for the softmax baselines.

    kind "none" is the NoPE baseline; "rope" rotates q and k pairwise with
    angles theta_k = base^(-2k/d) (positions divided by rope_scale first);
    "alibi" adds the logit bias -m * (j - i). window, when set, masks keys
    further than `window` positions behind the query (sliding window).
    Stick-breaking variants always use kind "none".
    """

    kind: str = "none"
    rope_base: float = 10000.0
    rope_scale: float = 1.0
    window: int | None = None

    def __post_init__(self):
        if self.kind not in VALID_SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.rope_scale < 1.0:
            raise ValueError("rope_scale must be >= 1")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")


def strict_causal_mask(L: int) -> np.ndarray:
    """Boolean mask of the valid (key i, query j) pairs, i < j."""
    return np.triu(np.ones((L, L), dtype=bool), k=1)


def sb_logits(q: Matrix, k: Matrix, scale: float | None = None) -> Matrix:
    """z[i, j] = k_i . q_j / sqrt(d). Entries at i >= j are never read."""
    if q.shape != k.shape:
        raise ValueError(f"q/k shape mismatch: {q.shape} vs {k.shape}")
    if q.ndim != 2 or q.shape[1] < 1:
        raise ValueError("q, k must be L x d with d >= 1")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    return (k @ q.T) * scale


def sb_weights_direct(z: Matrix) -> Matrix:
    """Attention weights by the literal product of sigmoids.

    For each query j, walk keys from j-1 down to 0 carrying the remaining
    stick: A[i, j] = sigma(z[i, j]) * rest, rest *= 1 - sigma(z[i, j]).
    Quadratic-time scalar loop; this is the oracle the log-space form is
    checked against. Entry (i, j) is finished before any logit at a key
    earlier than i is read, which the distraction-invariance tests rely on.
    """
    L = z.shape[0]
    betas = sigmoid(z)
    a = np.zeros((L, L))
    for j in range(L):
        rest = 1.0
        for i in range(j - 1, -1, -1):
            a[i, j] = betas[i, j] * rest
            rest *= 1.0 - betas[i, j]
    return a


def sb_weights_logspace(z: Matrix) -> tuple[Matrix, Matrix]:
    """Weights via the overflow-free log-space form.

    Returns (a, cumlog) where cumlog[i, j] = sum_{k=i}^{j-1} softplus(z[k, j])
    (inclusive of k = i, which turns the leading sigma(z) into exp(z - sp(z)))
    and a = exp(z - cumlog) on the strict upper triangle, 0 elsewhere. cumlog
    is reused by the backward pass and by the remainder variants (the
    remaining stick mass for query j is exp(-cumlog[0, j])).
    """
    L = z.shape[0]
    mask = strict_causal_mask(L)
    sp = np.where(mask, softplus_stable(z), 0.0)
    # suffix-sum down each column: rows i..j-1 of column j
    cumlog = np.flip(np.cumsum(np.flip(sp, 0), 0), 0)
    a = np.exp(np.where(mask, z - cumlog, -np.inf))
    return a, cumlog


def sb_forward(q: Matrix, k: Matrix, v: Matrix) -> tuple[Matrix, dict]:
    """o_j = sum_{i < j} A[i, j] v_i. o_0 is the zero vector (empty sum)."""
    if not (q.shape == k.shape == v.shape):
        raise ValueError("q, k, v must share one L x d shape")
    scale = 1.0 / math.sqrt(q.shape[1])
    z = sb_logits(q, k, scale)
    a, cumlog = sb_weights_logspace(z)
    o = a.T @ v
    cache = {"q": q, "k": k, "v": v, "z": z, "cumlog": cumlog, "a": a, "scale": scale}
    return o, cache


def sb_backward(cache: dict, d_o: Matrix) -> tuple[Matrix, Matrix, Matrix]:
    """Analytic gradients through the log-space forward.

    With dAt = dL/dA * A, the logit gradient is
        dz[i, j] = dAt[i, j] - sigma(z[i, j]) * sum_{i' <= i} dAt[i', j]
    (the correction sum runs over exactly the rows whose weights contain
    softplus(z[i, j]), i.e. i' <= i; an inclusive top-down cumsum). d_q, d_k
    chain through z = scale * k q^T and d_v_i = sum_j A[i, j] d_o_j.

    If the cache carries "d_a_extra" it is added to dL/dA before reweighting;
    the remainder variants in model.py use that hook for their extra output
    terms. The plain path ignores it.
    """
    q, k, v, z, a = cache["q"], cache["k"], cache["v"], cache["z"], cache["a"]
    scale = cache["scale"]
    if d_o.shape != v.shape:
        raise ValueError(f"d_o shape {d_o.shape} does not match v {v.shape}")
    mask = strict_causal_mask(z.shape[0])
    d_a = v @ d_o.T  # d_a[i, j] = v_i . d_o_j
    if "d_a_extra" in cache:
        d_a = d_a + cache["d_a_extra"]
    d_at = d_a * a  # a is zero off-mask, so d_at is too
    s = np.cumsum(d_at, axis=0)
    d_z = np.where(mask, d_at - sigmoid(z) * s, 0.0)
    d_q = d_z.T @ k * scale
    d_k = d_z @ q * scale
    d_v = a @ d_o
    return d_q, d_k, d_v


def sb_remaining_mass(a: Matrix) -> np.ndarray:
    """Per-query remaining stick mass 1 - sum_i A[i, j] (1.0 at j = 0)."""
    return 1.0 - a.sum(axis=0)


def sb_forward_remainder(q: Matrix, k: Matrix, v: Matrix) -> Matrix:
    """Remainder routing: o_j = sum_i A[i, j] v_i + (1 - sum_i A[i, j]) v_j.

    With an untouched stick the output is exactly the current value vector;
    with a saturated stick it coincides with plain sb_forward.
    """
    o, cache = sb_forward(q, k, v)
    rest = sb_remaining_mass(cache["a"])
    return o + rest[:, None] * v


def sb_recurrent(q: Matrix, k: Matrix, v: Matrix) -> Matrix:
    """Single-gate recurrence form: equal to sb_forward in exact arithmetic.

    For each query j, scan keys left to right:
        h <- (1 - beta[i, j]) * h + beta[i, j] * v_i,   o_j = h after i = j-1.
    Expanding the scan reproduces the stick-breaking product (the value term
    is v_i, the scanned key's value, not v_j).
    """
    if not (q.shape == k.shape == v.shape):
        raise ValueError("q, k, v must share one L x d shape")
    L, d = q.shape
    betas = sigmoid(sb_logits(q, k))
    o = np.zeros_like(v)
    for j in range(L):
        h = np.zeros(d)
        for i in range(j):
            h = (1.0 - betas[i, j]) * h + betas[i, j] * v[i]
        o[j] = h
    return o


def rope_rotate(
    x: Matrix,
    scheme: PositionScheme,
    positions: np.ndarray | None = None,
    inverse: bool = False,
) -> Matrix:
    """Pairwise 2-D rotations of each row by its position.

    Dimension pairs (2t, 2t+1) rotate by angle (pos / rope_scale) * theta_t,
    theta_t = base^(-2t/d). Row norms are preserved; dot products of rotated
    q and k depend only on position differences. inverse=True applies the
    transpose rotation (used by the backward pass).
    """
    L, d = x.shape
    if d % 2 != 0:
        raise ValueError("rotary rotation needs an even dimension")
    if positions is None:
        positions = np.arange(L)
    pos = np.asarray(positions, dtype=np.float64) / scheme.rope_scale
    half_idx = np.arange(d // 2, dtype=np.float64)
    freqs = scheme.rope_base ** (-2.0 * half_idx / d)
    ang = pos[:, None] * freqs[None, :]
    c, s = np.cos(ang), np.sin(ang)
    if inverse:
        s = -s
    x1, x2 = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = x1 * c - x2 * s
    out[:, 1::2] = x1 * s + x2 * c
    return out


def alibi_slopes(n_head: int) -> np.ndarray:
    """Per-head slopes m_h = 2^(-8h/H), h = 1..H."""
    h = np.arange(1, n_head + 1, dtype=np.float64)
    return 2.0 ** (-8.0 * h / n_head)


def _softmax_valid_mask(L: int, window: int | None) -> np.ndarray:
    # softmax keeps the conventional inclusive diagonal (i <= j)
    valid = np.tril(np.ones((L, L), dtype=bool), k=0).T
    if window is not None:
        i = np.arange(L)
        valid &= (i[None, :] - i[:, None]) < window
    return valid


def softmax_attention(
    q: Matrix,
    k: Matrix,
    v: Matrix,
    scheme: PositionScheme = PositionScheme(),
    alibi_slope: float | None = None,
) -> tuple[Matrix, dict]:
    """Causal softmax attention over i <= j with max-subtraction.

    Position handling per `scheme`: rotary on q/k, or additive bias
    -slope * (j - i) (slope defaults to the single-head rule 2^-8). The
    returned cache drives softmax_attention_backward.
    """
    if not (q.shape == k.shape == v.shape):
        raise ValueError("q, k, v must share one L x d shape")
    L, d = q.shape
    scale = 1.0 / math.sqrt(d)
    qr, kr = q, k
    if scheme.kind == "rope":
        qr = rope_rotate(q, scheme)
        kr = rope_rotate(k, scheme)
    z = (kr @ qr.T) * scale
    if scheme.kind == "alibi":
        slope = float(alibi_slopes(1)[0]) if alibi_slope is None else alibi_slope
        i = np.arange(L)
        z = z - slope * (i[None, :] - i[:, None])
    valid = _softmax_valid_mask(L, scheme.window)
    zm = np.where(valid, z, -np.inf)
    zmax = zm.max(axis=0)
    e = np.exp(zm - zmax[None, :])
    w = e / e.sum(axis=0)[None, :]
    o = w.T @ v
    cache = {
        "q": q, "k": k, "v": v, "qr": qr, "kr": kr,
        "w": w, "scale": scale, "scheme": scheme,
    }
    return o, cache


def softmax_attention_backward(cache: dict, d_o: Matrix) -> tuple[Matrix, Matrix, Matrix]:
    """Gradients for softmax_attention (bias terms carry no parameters)."""
    qr, kr, v, w, scale = cache["qr"], cache["kr"], cache["v"], cache["w"], cache["scale"]
    scheme: PositionScheme = cache["scheme"]
    if d_o.shape != v.shape:
        raise ValueError("d_o shape mismatch")
    d_w = v @ d_o.T
    # column-wise softmax jacobian: dz = w * (dw - sum_i w dw)
    s = (w * d_w).sum(axis=0)
    d_z = w * (d_w - s[None, :])
    d_qr = d_z.T @ kr * scale
    d_kr = d_z @ qr * scale
    d_v = w @ d_o
    if scheme.kind == "rope":
        d_q = rope_rotate(d_qr, scheme, inverse=True)
        d_k = rope_rotate(d_kr, scheme, inverse=True)
    else:
        d_q, d_k = d_qr, d_kr
    return d_q, d_k, d_v
