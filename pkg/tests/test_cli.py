"""End-to-end checks for the sb command line: exit codes, CSV schemas,
manifest contents, and rerun determinism."""

import csv
import json
import math

import numpy as np
import pytest

from sbattn.attention import PositionScheme
from sbattn.cli import main
from sbattn.model import AttentionConfig, ModelConfig, init_params, save_params
from sbattn.numerics import Rng


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def read_manifest(out):
    with open(out / "manifest.json") as fh:
        return json.load(fh)


class TestGradcheck:
    def test_default_run_passes(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {"seeds": 1})
        assert main(["gradcheck", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
        header, rows = read_csv(out / "gradcheck.csv")
        assert header == ["component", "max_rel_err", "tolerance", "result"]
        assert rows and all(r[3] == "pass" for r in rows)
        names = [r[0] for r in rows]
        assert any(n.startswith("sb.d_q") for n in names)
        assert any(n.startswith("blocked.twophase") for n in names)
        assert "model.softmax+rope" in names
        manifest = read_manifest(out)
        assert manifest["command"] == "gradcheck"
        assert "gradcheck.csv" in manifest["artifacts"]

    def test_injected_dk_fault_is_caught(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {"seeds": 1, "inject_fault": "dk_sign_flip"})
        assert main(["gradcheck", "--config", cfg, "--seed", "0", "--out", str(out)]) == 1
        _, rows = read_csv(out / "gradcheck.csv")
        failed = {r[0] for r in rows if r[3] == "fail"}
        assert failed and all(".d_k" in n for n in failed)
        # only the stick-breaking rows carry the injected fault
        assert all(n.startswith("sb.") for n in failed)

    def test_tolerance_override_forces_failures(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {"seeds": 1, "tolerance": 1e-12})
        assert main(["gradcheck", "--config", cfg, "--seed", "0", "--out", str(out)]) == 1
        _, rows = read_csv(out / "gradcheck.csv")
        assert any(r[3] == "fail" for r in rows)


class TestConfigHandling:
    def test_unparseable_config_exits_two(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("not json {")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_precision_exits_two(self, tmp_path):
        cfg = write_config(tmp_path, {"precision": "f16", "seeds": 1})
        assert main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_missing_task_kind_exits_two(self, tmp_path):
        cfg = write_config(tmp_path, {"task": {"kind": "sorting"}, "model": {}})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_flag_overrides_config_seed(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {"seed": 7, "lengths": [1], "d_blocks": [8]})
        assert main(["equiv", "--config", cfg, "--seed", "3", "--out", str(out)]) == 0
        assert read_manifest(out)["seed"] == 3


class TestEquiv:
    def test_reduced_grid_passes(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {"lengths": [1, 7, 64], "d_blocks": [8, 16]})
        assert main(["equiv", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
        header, rows = read_csv(out / "equiv.csv")
        assert header[:3] == ["L", "d_block", "skip"]
        assert len(rows) == 3 * 2 * 2
        assert all(r[-1] == "pass" for r in rows)
        # a length-1 sequence has no valid keys, so both paths emit zeros
        l1 = [r for r in rows if r[0] == "1"]
        assert all(float(r[3]) == 0.0 for r in l1)

    def test_f32_grid_passes_relative_bound(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {"lengths": [7, 64], "d_blocks": [16]})
        assert main(["equiv", "--config", cfg, "--seed", "0", "--out", str(out),
                     "--precision", "f32"]) == 0


class TestBench:
    def test_csv_schema_is_fixed(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {"lengths": [64], "d": 16, "warmups": 1})
        assert main(["bench", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
        header, rows = read_csv(out / "bench.csv")
        assert header == ["L", "d_block", "variant", "skip", "median_ms",
                          "tiles_visited", "tiles_skipped"]
        assert len(rows) == 2
        assert {r[3] for r in rows} == {"off", "on"}
        assert all(float(r[4]) > 0 for r in rows)
        assert (out / "bench_median_ms.svg").exists()

    def test_saturating_inputs_skip_tiles(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {"lengths": [256], "d": 16, "d_block": 32,
                                      "warmups": 1, "input": "saturating"})
        assert main(["bench", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
        _, rows = read_csv(out / "bench.csv")
        off = next(r for r in rows if r[3] == "off")
        on = next(r for r in rows if r[3] == "on")
        assert int(off[6]) == 0
        assert int(on[6]) > 0
        assert int(on[5]) < int(off[5])
        assert int(on[5]) + int(on[6]) == int(off[5])

    def test_dead_logits_do_not_skip(self, tmp_path):
        # logit -100 everywhere leaves the stick untouched, so the skip
        # sweep visits exactly the tiles the plain sweep does
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {"lengths": [128], "d": 8, "d_block": 32,
                                      "warmups": 1, "input": "dead"})
        assert main(["bench", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
        _, rows = read_csv(out / "bench.csv")
        assert rows[0][5] == rows[1][5]


TINY_TRAIN = {
    "task": {"kind": "mqrar", "n_kv": 2, "n_queries": 2},
    "model": {"n_head": 1, "d_head": 16, "n_layer": 1, "d_inter": 32,
              "variant": "sb"},
    "sweep": {"steps": 4, "batch_size": 8, "lrs": [1e-3, 1e-4], "seeds": [0]},
    "eval_size": 16,
    "eval_every": 2,
}


class TestTrain:
    def test_artifacts_and_summary(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, TINY_TRAIN)
        assert main(["train", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
        for name in ("metrics_lr1.00e-03_s0.csv", "metrics_lr1.00e-04_s0.csv",
                     "summary.json", "best_params.json", "train_curves.svg",
                     "manifest.json"):
            assert (out / name).exists(), name
        header, rows = read_csv(out / "metrics_lr1.00e-03_s0.csv")
        assert header == ["step", "lr", "loss", "accuracy"]
        assert [r[0] for r in rows] == ["2", "4"]
        with open(out / "summary.json") as fh:
            summary = json.load(fh)
        assert summary["metric"] == "accuracy"
        assert summary["best"]["lr"] in (1e-3, 1e-4)
        assert len(summary["arms"]) == 2

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, TINY_TRAIN)
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
            outs.append(out)
        for name in ("metrics_lr1.00e-03_s0.csv", "summary.json", "best_params.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def zero_head_checkpoint(tmp_path, vocab_size=256):
    attn = AttentionConfig(n_head=1, d_head=16, scheme=PositionScheme())
    cfg = ModelConfig(vocab_size=vocab_size, n_layer=1, d_inter=32, attn=attn)
    params = init_params(cfg, Rng(0))
    params["head"][:] = 0.0
    path = tmp_path / "ckpt.json"
    save_params(params, path)
    return str(path)


class TestEvalLength:
    def test_zeroed_head_gives_flat_uniform_nll(self, tmp_path):
        out = tmp_path / "out"
        ckpt = zero_head_checkpoint(tmp_path)
        cfg = write_config(tmp_path, {
            "model": {"n_head": 1, "d_head": 16, "n_layer": 1, "d_inter": 32,
                      "vocab_size": 256},
            "corpus": {"kind": "synthetic", "n_chars": 600, "seed": 3},
            "checkpoint": ckpt,
            "l_train": 16,
            "factors": [1, 2, 4],
            "chunk": 4,
        })
        assert main(["eval_length", "--config", cfg, "--seed", "0",
                     "--out", str(out)]) == 0
        header, rows = read_csv(out / "eval_length.csv")
        assert header == ["l_eval", "nll"]
        assert [int(r[0]) for r in rows] == [16, 32, 64]
        for r in rows:
            assert float(r[1]) == pytest.approx(math.log(256), abs=1e-12)
        assert (out / "eval_length.svg").exists()

    def test_corpus_shorter_than_longest_window_exits_two(self, tmp_path):
        cfg = write_config(tmp_path, {
            "model": {"vocab_size": 256},
            "corpus": {"kind": "text", "text": "tiny"},
            "l_train": 64,
        })
        assert main(["eval_length", "--config", cfg,
                     "--out", str(tmp_path / "o")]) == 2


class TestDumpAttn:
    def test_stick_mass_is_conserved(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {
            "model": {"n_head": 2, "d_head": 8, "n_layer": 2, "d_inter": 32,
                      "variant": "sb_remainder_bias", "group_norm": True},
            "instance": {"kind": "mqar", "n_kv": 3, "seed": 5},
        })
        assert main(["dump_attn", "--config", cfg, "--seed", "0",
                     "--out", str(out)]) == 0
        for i in range(2):
            for h in range(2):
                assert (out / f"attn_l{i}_h{h}.svg").exists()
                header, rows = read_csv(out / f"attn_l{i}_h{h}.csv")
                assert header[-1] == "rest"
                for r in rows:
                    weights = np.array([float(x) for x in r[:-1]])
                    rest = float(r[-1])
                    assert weights.min() >= 0.0
                    assert rest >= -1e-12
                    assert weights.sum() <= 1.0 + 1e-9
                    assert weights.sum() + rest == pytest.approx(1.0, abs=1e-9)
        # the first query has no earlier keys: whole stick is left over
        _, rows = read_csv(out / "attn_l0_h0.csv")
        assert float(rows[0][-1]) == pytest.approx(1.0, abs=1e-12)

    def test_softmax_rows_sum_to_one_without_rest(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path, {
            "model": {"n_head": 1, "d_head": 8, "n_layer": 1, "d_inter": 16,
                      "variant": "softmax", "scheme": {"kind": "rope"}},
            "instance": {"tokens": [3, 29, 7, 31, 3]},
        })
        assert main(["dump_attn", "--config", cfg, "--seed", "0",
                     "--out", str(out)]) == 0
        header, rows = read_csv(out / "attn_l0_h0.csv")
        assert header == [f"k{j}" for j in range(5)]
        for r in rows:
            assert sum(float(x) for x in r) == pytest.approx(1.0, abs=1e-12)
