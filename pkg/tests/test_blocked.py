import math

import numpy as np
import pytest

from sbattn.attention import sb_forward, sb_backward, sb_weights_logspace
from sbattn.blocked import (
    blocked_backward_fused,
    blocked_backward_twophase,
    blocked_forward,
    make_cache,
    plan_blocks,
    sb_forward_blocked,
    skip_stats,
)
from sbattn.numerics import Rng, max_abs_diff


def random_qkv(L, d, seed):
    rng = Rng(seed)
    return rng.normal(L, d), rng.normal(L, d), rng.normal(L, d)


def saturating_inputs(L, d, seed=0):
    # logit 40 between each query j and key j-1: the stick is consumed at the
    # nearest key, so remaining mass collapses below any eps within one tile
    q = np.zeros((L, d))
    k = np.zeros((L, d))
    for j in range(L):
        q[j, j % d] = 40.0 * math.sqrt(d)
    for i in range(L):
        k[i, (i + 1) % d] = 1.0
    return q, k, Rng(seed).normal(L, d)


def run_both_backwards(q, k, v, d_o, layout, **fw):
    o, acc, stats = blocked_forward(q, k, v, layout, two_phase=True, **fw)
    cache = make_cache(q, k, v, layout, acc, stats)
    fused = blocked_backward_fused(cache, d_o)
    two = blocked_backward_twophase(cache, d_o)
    return o, fused, two


class TestPlanBlocks:
    def test_two_blocks(self):
        lay = plan_blocks(128, 64)
        assert lay.n_blocks == 2 and lay.tail == 0 and lay.n_tiles == 3

    def test_tail(self):
        lay = plan_blocks(100, 64)
        assert lay.n_blocks == 2 and lay.tail == 36
        assert lay.span(1) == (64, 100)

    def test_single_block(self):
        lay = plan_blocks(64, 64)
        assert lay.n_blocks == 1 and lay.n_tiles == 1

    def test_zero_sizes_rejected(self):
        with pytest.raises(ValueError):
            plan_blocks(0, 64)
        with pytest.raises(ValueError):
            plan_blocks(16, 0)


class TestForward:
    @pytest.mark.parametrize("d_block", [8, 16, 64])
    def test_matches_reference(self, d_block):
        q, k, v = random_qkv(256, 32, 7)
        o_ref, _ = sb_forward(q, k, v)
        o, _, _ = blocked_forward(q, k, v, plan_blocks(256, d_block))
        assert max_abs_diff(o, o_ref) < 1e-10

    def test_single_tile_degenerate(self):
        q, k, v = random_qkv(48, 8, 3)
        o_ref, _ = sb_forward(q, k, v)
        o, _, _ = blocked_forward(q, k, v, plan_blocks(48, 64))
        assert max_abs_diff(o, o_ref) < 1e-12

    def test_saturating_input_skips_and_matches(self):
        q, k, v = saturating_inputs(256, 32)
        layout = plan_blocks(256, 16)
        o_ref, _ = sb_forward(q, k, v)
        o, _, stats = blocked_forward(q, k, v, layout, skip=True)
        assert max_abs_diff(o, o_ref) < 1e-10
        visited, skipped, fraction = skip_stats(stats)
        assert visited + skipped == layout.n_tiles
        assert fraction > 0.5

    def test_random_config_sweep(self):
        rng = Rng(99)
        for trial in range(200):
            L = int(rng.integers(1, 128))
            d = int(rng.integers(1, 24))
            d_block = int(rng.integers(1, 40))
            q, k, v = random_qkv(L, d, 1000 + trial)
            o_ref, _ = sb_forward(q, k, v)
            o, _, _ = blocked_forward(q, k, v, plan_blocks(L, d_block))
            assert max_abs_diff(o, o_ref) < 1e-10, (L, d, d_block)

    def test_float32_relative(self):
        for seed, (L, db) in enumerate([(96, 16), (200, 64), (130, 8)]):
            q, k, v = random_qkv(L, 16, 40 + seed)
            o_ref, _ = sb_forward(q, k, v)
            o, _, _ = blocked_forward(q, k, v, plan_blocks(L, db), dtype=np.float32)
            assert o.dtype == np.float32
            rel = max_abs_diff(o.astype(np.float64), o_ref) / np.abs(o_ref).max()
            assert rel < 2e-3

    def test_skip_soundness_random_inputs(self):
        q, k, v = random_qkv(160, 16, 9)
        layout = plan_blocks(160, 16)
        o_off, _, _ = blocked_forward(q, k, v, layout, skip=False)
        o_on, _, s_on = blocked_forward(q, k, v, layout, skip=True)
        assert max_abs_diff(o_on, o_off) < 1e-9

    def test_no_skip_when_stick_untouched(self):
        L, d = 256, 8
        q = np.zeros((L, d))
        q[:, 0] = 1.0
        k = np.zeros((L, d))
        k[:, 0] = -100.0 * math.sqrt(d)
        v = Rng(2).normal(L, d)
        _, _, stats = blocked_forward(q, k, v, plan_blocks(L, 16), skip=True)
        assert stats.skipped == 0

    def test_accumulator_is_remaining_mass(self):
        q, k, v = random_qkv(100, 8, 21)
        _, acc, _ = blocked_forward(q, k, v, plan_blocks(100, 32))
        z = (k @ q.T) / math.sqrt(8)
        a, _ = sb_weights_logspace(z)
        rest = 1.0 - a.sum(axis=0)
        assert max_abs_diff(np.exp(acc.a), rest) < 1e-9

    def test_layout_mismatch_rejected(self):
        q, k, v = random_qkv(32, 4, 1)
        with pytest.raises(ValueError):
            blocked_forward(q, k, v, plan_blocks(64, 16))


class TestBackwardFused:
    def test_matches_reference(self):
        q, k, v = random_qkv(128, 16, 5)
        target = Rng(55).normal(128, 16)
        o_ref, cache_ref = sb_forward(q, k, v)
        g_ref = sb_backward(cache_ref, target)
        layout = plan_blocks(128, 32)
        o, cache = sb_forward_blocked(q, k, v, layout)
        g = blocked_backward_fused(cache, target)
        for got, ref in zip(g, g_ref):
            assert max_abs_diff(got, ref) < 1e-9

    def test_zero_upstream(self):
        q, k, v = random_qkv(70, 8, 6)
        _, cache = sb_forward_blocked(q, k, v, plan_blocks(70, 32))
        g = blocked_backward_fused(cache, np.zeros((70, 8)))
        for m in g:
            assert np.array_equal(m, np.zeros((70, 8)))

    def test_worker_counts_bit_identical(self):
        q, k, v = random_qkv(200, 16, 8)
        d_o = Rng(80).normal(200, 16)
        layout = plan_blocks(200, 32)
        runs = []
        for w in (1, 2, 8):
            o, acc, stats = blocked_forward(q, k, v, layout, two_phase=True, n_workers=w)
            cache = make_cache(q, k, v, layout, acc, stats)
            fused = blocked_backward_fused(cache, d_o, n_workers=w)
            two = blocked_backward_twophase(cache, d_o, n_workers=w)
            runs.append((o, *fused, *two[:3]))
        for other in runs[1:]:
            for a, b in zip(runs[0], other):
                assert np.array_equal(a, b)

    def test_repeated_runs_bit_identical(self):
        q, k, v = random_qkv(96, 8, 10)
        layout = plan_blocks(96, 16)
        first = run_both_backwards(q, k, v, v, layout)
        second = run_both_backwards(q, k, v, v, layout)
        assert np.array_equal(first[0], second[0])
        for a, b in zip(first[1] + first[2][:3], second[1] + second[2][:3]):
            assert np.array_equal(a, b)

    def test_backward_after_skip_matches(self):
        q, k, v = saturating_inputs(192, 16, seed=4)
        d_o = Rng(81).normal(192, 16)
        layout = plan_blocks(192, 16)
        o_on, acc_on, st_on = blocked_forward(q, k, v, layout, skip=True)
        o_off, acc_off, st_off = blocked_forward(q, k, v, layout, skip=False)
        assert st_on.skipped > 0
        g_on = blocked_backward_fused(make_cache(q, k, v, layout, acc_on, st_on), d_o)
        g_off = blocked_backward_fused(make_cache(q, k, v, layout, acc_off, st_off), d_o)
        for a, b in zip(g_on, g_off):
            assert max_abs_diff(a, b) < 1e-9


class TestBackwardTwoPhase:
    def test_matches_fused(self):
        q, k, v = random_qkv(192, 16, 11)
        d_o = Rng(60).normal(192, 16)
        layout = plan_blocks(192, 64)
        _, fused, two = run_both_backwards(q, k, v, d_o, layout)
        for a, b in zip(two[:3], fused):
            assert max_abs_diff(a, b) < 1e-10

    def test_mem_report_counts_tiles(self):
        q, k, v = random_qkv(192, 8, 12)
        layout = plan_blocks(192, 64)
        _, _, two = run_both_backwards(q, k, v, v, layout)
        assert two[3] == 6  # 3-block lower triangle

    def test_single_block_matches_reference(self):
        q, k, v = random_qkv(64, 8, 13)
        d_o = Rng(61).normal(64, 8)
        _, cache_ref = sb_forward(q, k, v)
        g_ref = sb_backward(cache_ref, d_o)
        layout = plan_blocks(64, 64)
        o, acc, stats = blocked_forward(q, k, v, layout, two_phase=True)
        g = blocked_backward_twophase(make_cache(q, k, v, layout, acc, stats), d_o)
        for got, ref in zip(g[:3], g_ref):
            assert max_abs_diff(got, ref) < 1e-10

    def test_missing_snapshots_rejected(self):
        q, k, v = random_qkv(64, 8, 14)
        layout = plan_blocks(64, 32)
        _, cache = sb_forward_blocked(q, k, v, layout)  # no two_phase
        with pytest.raises(ValueError, match="M snapshots"):
            blocked_backward_twophase(cache, v)


class TestRowOffset:
    def test_matches_reference_with_extra_term(self):
        # per-query offset s subtracted from dO V^T: same as adding -s to
        # every dL/dA entry of that query's column in the reference backward
        L, d = 96, 8
        q, k, v = random_qkv(L, d, 15)
        d_o = Rng(62).normal(L, d)
        s = Rng(63).normal(1, L)[0]
        o_ref, cache_ref = sb_forward(q, k, v)
        cache_ref["d_a_extra"] = np.broadcast_to(-s[None, :], (L, L))
        g_ref = sb_backward(cache_ref, d_o)
        layout = plan_blocks(L, 32)
        o, acc, stats = blocked_forward(q, k, v, layout, two_phase=True)
        cache = make_cache(q, k, v, layout, acc, stats)
        fused = blocked_backward_fused(cache, d_o, row_offset=s)
        two = blocked_backward_twophase(cache, d_o, row_offset=s)
        for got, ref in zip(fused, g_ref):
            assert max_abs_diff(got, ref) < 1e-9
        for got, ref in zip(two[:3], fused):
            assert max_abs_diff(got, ref) < 1e-10


class TestEdges:
    def test_length_one(self):
        q, k, v = random_qkv(1, 4, 16)
        layout = plan_blocks(1, 8)
        o, fused, two = run_both_backwards(q, k, v, np.ones((1, 4)), layout)
        assert np.array_equal(o, np.zeros((1, 4)))
        for g in fused + two[:3]:
            assert np.array_equal(g, np.zeros((1, 4)))

    @pytest.mark.parametrize("L,d_block", [(100, 64), (131, 8), (65, 64), (7, 8)])
    def test_tails(self, L, d_block):
        q, k, v = random_qkv(L, 8, 17)
        d_o = Rng(64).normal(L, 8)
        o_ref, cache_ref = sb_forward(q, k, v)
        g_ref = sb_backward(cache_ref, d_o)
        layout = plan_blocks(L, d_block)
        o, fused, two = run_both_backwards(q, k, v, d_o, layout)
        assert max_abs_diff(o, o_ref) < 1e-10
        for got, ref in zip(fused, g_ref):
            assert max_abs_diff(got, ref) < 1e-9
        for got, ref in zip(two[:3], fused):
            assert max_abs_diff(got, ref) < 1e-10
