"""Tiled stick-breaking attention with O(L) working state per query block.

The L x L score matrix is cut into d_block x d_block tiles; only the lower
triangle of tiles (key block <= query block) is ever touched. Tiles here are
oriented (query row, key column), i.e. transposed relative to the reference
module's (key, query) score matrices, matching how the sweeps are written:

forward, per query block, key blocks right to left:
    Z = Q K^T * scale
    Lt = -softplus(Z)                      (0 at masked diagonal entries)
    A = exp(Z + cumsum<-(Lt) + a)          (cumsum toward the left, inclusive)
    O += A V;  a += rowsum(Lt)
exp(a) is the remaining stick mass left of the current tile; once it falls
below skip_eps for every row of the block, all remaining tiles to the left
are provably negligible and can be skipped.

fused backward, key blocks left to right, rolls a back by subtracting each
tile's rowsums before recomputing its A, then
    dAt = A * (dO V^T)
    dZ = dAt - (1 - exp(Lt)) * (cumsum->(dAt) + b)     (1 - exp(Lt) = sigma(Z))
    b += rowsum(dAt)
with dQ accumulated per query block and dK/dV partials reduced in a fixed
query-block order (deterministic regardless of worker count).

two-phase backward splits that into a dQ phase (stores the b snapshot per
tile into N; loads per-tile a snapshots M written by a two-phase-aware
forward) and a dK/dV phase that owns disjoint key-block rows, trading
O(tiles) snapshot memory for parallelism without atomics.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .numerics import Matrix, softplus_stable

DEFAULT_BLOCK = 64
SKIP_EPS_F64 = 1e-12
SKIP_EPS_F32 = 1e-6


@dataclass(frozen=True)
class BlockLayout:
    seq_len: int
    block: int
    n_blocks: int
    tail: int  # seq_len mod block; 0 means the last block is full

    def span(self, b: int) -> tuple[int, int]:
        """Half-open row/column range of block b."""
        lo = b * self.block
        return lo, min(lo + self.block, self.seq_len)

    @property
    def n_tiles(self) -> int:
        return self.n_blocks * (self.n_blocks + 1) // 2


def plan_blocks(seq_len: int, d_block: int = DEFAULT_BLOCK) -> BlockLayout:
    if seq_len < 1 or d_block < 1:
        raise ValueError("seq_len and d_block must be >= 1")
    n_blocks = -(-seq_len // d_block)
    return BlockLayout(seq_len, d_block, n_blocks, seq_len % d_block)


@dataclass
class RowLogAccumulator:
    """Final per-query-row a = sum of -softplus row masses (always <= 0).

    m_blocks holds the per-tile a snapshots (value in effect while the tile
    was processed) when the forward ran in two-phase mode, keyed (qb, kb).
    """

    a: np.ndarray
    m_blocks: dict | None = None


@dataclass
class TileStats:
    total: int
    visited: int
    skipped: int
    first_kb: np.ndarray  # per query block, leftmost key block actually processed


@dataclass
class BlockedCache:
    q: Matrix
    k: Matrix
    v: Matrix
    scale: float
    layout: BlockLayout
    acc: RowLogAccumulator
    stats: TileStats


def skip_stats(stats: TileStats) -> tuple[int, int, float]:
    """(visited, skipped, skipped fraction) out of all lower-triangular tiles."""
    return stats.visited, stats.skipped, stats.skipped / stats.total


def default_skip_eps(dtype) -> float:
    return SKIP_EPS_F32 if np.dtype(dtype) == np.float32 else SKIP_EPS_F64


def _diag_mask(n: int) -> np.ndarray:
    # strictly-causal within a diagonal tile: key column < query row
    return np.tri(n, n, -1, dtype=bool)


def _check_inputs(q, k, v, layout):
    if not (q.shape == k.shape == v.shape):
        raise ValueError("q, k, v must share one L x d shape")
    if layout.seq_len != q.shape[0]:
        raise ValueError(f"layout is for L={layout.seq_len}, inputs have L={q.shape[0]}")


def _map_ordered(fn, items, n_workers):
    if n_workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, items))


def blocked_forward(
    q: Matrix,
    k: Matrix,
    v: Matrix,
    layout: BlockLayout,
    skip: bool = False,
    skip_eps: float | None = None,
    two_phase: bool = False,
    dtype=None,
    n_workers: int = 1,
) -> tuple[Matrix, RowLogAccumulator, TileStats]:
    """Tiled forward pass. Returns (o, row accumulator, tile statistics).

    skip enables early exit per query block once every row's remaining stick
    mass exp(a) drops below skip_eps (default 1e-12 in float64, 1e-6 in
    float32). two_phase additionally stores the per-tile a snapshots needed
    by blocked_backward_twophase. dtype float32 runs the whole sweep in
    single precision for benchmarking.
    """
    _check_inputs(q, k, v, layout)
    if dtype is not None:
        q = np.ascontiguousarray(q, dtype=dtype)
        k = np.ascontiguousarray(k, dtype=dtype)
        v = np.ascontiguousarray(v, dtype=dtype)
    if skip_eps is None:
        skip_eps = default_skip_eps(q.dtype)
    if not 0.0 < skip_eps < 1.0:
        raise ValueError("skip_eps must be in (0, 1)")
    log_eps = math.log(skip_eps)
    L, d = q.shape
    scale = 1.0 / math.sqrt(d)
    o = np.zeros((L, d), dtype=q.dtype)
    a_all = np.zeros(L, dtype=q.dtype)
    first_kb = np.zeros(layout.n_blocks, dtype=np.int64)
    m_blocks: dict | None = {} if two_phase else None

    def run_query_block(qb: int):
        qs, qe = layout.span(qb)
        qblk = q[qs:qe]
        doblk_rows = qe - qs
        a_cur = np.zeros(doblk_rows, dtype=q.dtype)
        o_blk = np.zeros((doblk_rows, d), dtype=q.dtype)
        visited = 0
        lowest = qb
        local_m = {} if two_phase else None
        for kb in range(qb, -1, -1):
            if skip and kb < qb and a_cur.max() < log_eps:
                break
            ks, ke = layout.span(kb)
            z = (qblk @ k[ks:ke].T) * scale
            lt = -softplus_stable(z)
            if kb == qb:
                mask = _diag_mask(doblk_rows)
                lt = np.where(mask, lt, 0.0)
                expo = np.where(mask, z + _cumsum_left(lt) + a_cur[:, None], -np.inf)
            else:
                expo = z + _cumsum_left(lt) + a_cur[:, None]
            a_tile = np.exp(expo)
            o_blk += a_tile @ v[ks:ke]
            if two_phase:
                local_m[(qb, kb)] = a_cur.copy()
            a_cur = a_cur + lt.sum(axis=1)
            visited += 1
            lowest = kb
        return qb, o_blk, a_cur, visited, lowest, local_m

    results = _map_ordered(run_query_block, range(layout.n_blocks), n_workers)
    visited_total = 0
    for qb, o_blk, a_cur, visited, lowest, local_m in results:
        qs, qe = layout.span(qb)
        o[qs:qe] = o_blk
        a_all[qs:qe] = a_cur
        visited_total += visited
        first_kb[qb] = lowest
        if two_phase:
            m_blocks.update(local_m)
    stats = TileStats(layout.n_tiles, visited_total, layout.n_tiles - visited_total, first_kb)
    return o, RowLogAccumulator(a_all, m_blocks), stats


def _cumsum_left(lt: np.ndarray) -> np.ndarray:
    # inclusive suffix sums along keys: entry (r, c) sums columns c..end
    return np.flip(np.cumsum(np.flip(lt, 1), 1), 1)


def make_cache(q, k, v, layout, acc, stats) -> BlockedCache:
    return BlockedCache(q, k, v, 1.0 / math.sqrt(q.shape[1]), layout, acc, stats)


def sb_forward_blocked(q, k, v, layout=None, **kw) -> tuple[Matrix, BlockedCache]:
    """Convenience wrapper returning (o, cache) like the reference forward."""
    if layout is None:
        layout = plan_blocks(q.shape[0])
    o, acc, stats = blocked_forward(q, k, v, layout, **kw)
    qq = q if kw.get("dtype") is None else np.asarray(q, dtype=kw["dtype"])
    kk = k if kw.get("dtype") is None else np.asarray(k, dtype=kw["dtype"])
    vv = v if kw.get("dtype") is None else np.asarray(v, dtype=kw["dtype"])
    return o, make_cache(qq, kk, vv, layout, acc, stats)


def blocked_backward_fused(
    cache: BlockedCache,
    d_o: Matrix,
    layout: BlockLayout | None = None,
    row_offset: np.ndarray | None = None,
    n_workers: int = 1,
) -> tuple[Matrix, Matrix, Matrix]:
    """One-pass backward: per query block, key blocks left to right.

    Rolls the forward's final a backward tile by tile, recomputes A, and
    chains gradients. dK/dV contributions from different query blocks are
    reduced in ascending query-block order, so results do not depend on
    n_workers. row_offset, when given, is subtracted per query row from the
    dO V^T inner products before reweighting (the remainder variants use it).
    """
    layout = _resolve_layout(cache, layout)
    q, k, v, scale = cache.q, cache.k, cache.v, cache.scale
    if d_o.shape != v.shape:
        raise ValueError("d_o shape mismatch")
    d_o = np.asarray(d_o, dtype=q.dtype)
    L, d = q.shape
    d_q = np.zeros_like(q)

    def run_query_block(qb: int):
        qs, qe = layout.span(qb)
        qblk = q[qs:qe]
        do_blk = d_o[qs:qe]
        off = row_offset[qs:qe, None] if row_offset is not None else None
        acc = cache.acc.a[qs:qe].astype(q.dtype, copy=True)
        b_cur = np.zeros(qe - qs, dtype=q.dtype)
        dq_blk = np.zeros_like(qblk)
        partials = {}
        for kb in range(int(cache.stats.first_kb[qb]), qb + 1):
            ks, ke = layout.span(kb)
            z = (qblk @ k[ks:ke].T) * scale
            lt = -softplus_stable(z)
            if kb == qb:
                mask = _diag_mask(qe - qs)
                lt = np.where(mask, lt, 0.0)
            acc = acc - lt.sum(axis=1)  # a as it was when the tile was processed
            if kb == qb:
                expo = np.where(mask, z + _cumsum_left(lt) + acc[:, None], -np.inf)
            else:
                expo = z + _cumsum_left(lt) + acc[:, None]
            a_tile = np.exp(expo)
            d_w = do_blk @ v[ks:ke].T
            if off is not None:
                d_w = d_w - off
            d_at = a_tile * d_w
            sig = 1.0 - np.exp(lt)  # sigma(z); 0 at masked entries
            d_z = d_at - sig * (np.cumsum(d_at, axis=1) + b_cur[:, None])
            b_cur = b_cur + d_at.sum(axis=1)
            dq_blk += d_z @ k[ks:ke] * scale
            partials[kb] = (d_z.T @ qblk * scale, a_tile.T @ do_blk)
        return qb, dq_blk, partials

    results = _map_ordered(run_query_block, range(layout.n_blocks), n_workers)
    d_k = np.zeros_like(k)
    d_v = np.zeros_like(v)
    # fixed reduction order: ascending query block for every key block
    for qb, dq_blk, partials in results:
        qs, qe = layout.span(qb)
        d_q[qs:qe] = dq_blk
        for kb, (dk_part, dv_part) in sorted(partials.items()):
            ks, ke = layout.span(kb)
            d_k[ks:ke] += dk_part
            d_v[ks:ke] += dv_part
    return d_q, d_k, d_v


def blocked_backward_twophase(
    cache: BlockedCache,
    d_o: Matrix,
    layout: BlockLayout | None = None,
    row_offset: np.ndarray | None = None,
    n_workers: int = 1,
) -> tuple[Matrix, Matrix, Matrix, int]:
    """Two-phase backward using the stored per-tile accumulators.

    Phase 1 (parallel over query blocks, key blocks left to right) computes
    dQ, loading each tile's a snapshot from M and persisting the running b
    snapshot into N. Phase 2 (parallel over key blocks, query blocks top to
    bottom) recomputes each tile from M and N and accumulates dK and dV into
    rows it alone owns. Returns (d_q, d_k, d_v, stored-tile count).
    """
    layout = _resolve_layout(cache, layout)
    if cache.acc.m_blocks is None:
        raise ValueError("two-phase backward needs a forward run with two_phase=True (M snapshots missing)")
    q, k, v, scale = cache.q, cache.k, cache.v, cache.scale
    if d_o.shape != v.shape:
        raise ValueError("d_o shape mismatch")
    d_o = np.asarray(d_o, dtype=q.dtype)
    m_blocks = cache.acc.m_blocks
    d_q = np.zeros_like(q)
    n_blocks: dict = {}

    def recompute_tile(qb, kb, qblk, acc):
        ks, ke = layout.span(kb)
        z = (qblk @ k[ks:ke].T) * scale
        lt = -softplus_stable(z)
        if kb == qb:
            mask = _diag_mask(z.shape[0])
            lt = np.where(mask, lt, 0.0)
            expo = np.where(mask, z + _cumsum_left(lt) + acc[:, None], -np.inf)
        else:
            expo = z + _cumsum_left(lt) + acc[:, None]
        return np.exp(expo), lt

    def phase1(qb: int):
        qs, qe = layout.span(qb)
        qblk = q[qs:qe]
        do_blk = d_o[qs:qe]
        off = row_offset[qs:qe, None] if row_offset is not None else None
        b_cur = np.zeros(qe - qs, dtype=q.dtype)
        dq_blk = np.zeros_like(qblk)
        local_n = {}
        for kb in range(int(cache.stats.first_kb[qb]), qb + 1):
            a_tile, lt = recompute_tile(qb, kb, qblk, m_blocks[(qb, kb)])
            d_w = do_blk @ v[layout.span(kb)[0] : layout.span(kb)[1]].T
            if off is not None:
                d_w = d_w - off
            d_at = a_tile * d_w
            sig = 1.0 - np.exp(lt)
            d_z = d_at - sig * (np.cumsum(d_at, axis=1) + b_cur[:, None])
            local_n[(qb, kb)] = b_cur.copy()  # value in effect for this tile
            b_cur = b_cur + d_at.sum(axis=1)
            ks, ke = layout.span(kb)
            dq_blk += d_z @ k[ks:ke] * scale
        return qb, dq_blk, local_n

    for qb, dq_blk, local_n in _map_ordered(phase1, range(layout.n_blocks), n_workers):
        qs, qe = layout.span(qb)
        d_q[qs:qe] = dq_blk
        n_blocks.update(local_n)

    d_k = np.zeros_like(k)
    d_v = np.zeros_like(v)

    def phase2(kb: int):
        ks, ke = layout.span(kb)
        dk_blk = np.zeros((ke - ks, q.shape[1]), dtype=q.dtype)
        dv_blk = np.zeros_like(dk_blk)
        for qb in range(kb, layout.n_blocks):
            if (qb, kb) not in m_blocks:
                continue  # tile skipped by the forward
            qs, qe = layout.span(qb)
            qblk = q[qs:qe]
            do_blk = d_o[qs:qe]
            a_tile, lt = recompute_tile(qb, kb, qblk, m_blocks[(qb, kb)])
            d_w = do_blk @ v[ks:ke].T
            if row_offset is not None:
                d_w = d_w - row_offset[qs:qe, None]
            d_at = a_tile * d_w
            sig = 1.0 - np.exp(lt)
            d_z = d_at - sig * (np.cumsum(d_at, axis=1) + n_blocks[(qb, kb)][:, None])
            dk_blk += d_z.T @ qblk * scale
            dv_blk += a_tile.T @ do_blk
        return kb, dk_blk, dv_blk

    for kb, dk_blk, dv_blk in _map_ordered(phase2, range(layout.n_blocks), n_workers):
        ks, ke = layout.span(kb)
        d_k[ks:ke] = dk_blk
        d_v[ks:ke] = dv_blk
    return d_q, d_k, d_v, len(m_blocks)


def _resolve_layout(cache: BlockedCache, layout: BlockLayout | None) -> BlockLayout:
    if layout is None:
        return cache.layout
    if layout != cache.layout:
        raise ValueError("layout does not match the one the cache was built with")
    return layout
