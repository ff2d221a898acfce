"""Command-line harness: verification suites, kernel benchmarks, training
sweeps, length-generalization evaluation, and attention-map dumps.

Usage: sb <command> --config <path> --seed <u64> --out <dir>
          [--threads N] [--precision f32|f64]

Every command writes its artifacts (CSV, SVG, JSON) under --out plus a
manifest.json holding the fully resolved configuration and library versions,
so a run can be reproduced from its manifest alone. Flag values override
config-file keys, which override built-in defaults.

Exit codes: 0 all checks passed, 1 a check failed, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import statistics
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import plots
from .attention import (
    PositionScheme,
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
    skip_stats,
)
from .batched import forward_batch
from .model import (
    AttentionConfig,
    ModelConfig,
    gelu,
    gelu_backward,
    init_params,
    layer_norm,
    layer_norm_backward,
    load_params,
    save_params,
    transformer_backward,
    transformer_forward,
)
from .numerics import Rng, finite_diff_grad, max_rel_err
from .tasks import DEFAULT_VOCAB, gen_mqar, gen_mqrar, load_jsonl, synth_corpus
from .training import (
    ExperimentSpec,
    SweepSpec,
    batch_nll_at_length,
    cross_entropy_masked,
    run_sweep,
    task_vocab,
)


class ConfigError(ValueError):
    """Bad or inconsistent run configuration; maps to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    command: str
    options: dict
    seed: int
    out: str
    threads: int
    precision: str


# --- plumbing ---------------------------------------------------------------


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from err
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _resolve(args: argparse.Namespace) -> RunConfig:
    options = _load_config_file(args.config)
    seed = args.seed if args.seed is not None else int(options.get("seed", 0))
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    precision = args.precision or options.get("precision", "f64")
    if precision not in ("f32", "f64"):
        raise ConfigError(f"unknown precision {precision!r}")
    threads = args.threads if args.threads is not None else int(options.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads must be positive")
    return RunConfig(command=args.command, options=options, seed=seed,
                     out=args.out, threads=threads, precision=precision)


def _write_csv(run: RunConfig, name: str, header, rows) -> str:
    path = os.path.join(run.out, name)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return name


def _write_manifest(run: RunConfig, artifacts: list[str]) -> None:
    try:
        from importlib.metadata import version
        pkg = version("sbattn")
    except Exception:
        pkg = "unknown"
    import matplotlib
    manifest = {
        "command": run.command,
        "seed": run.seed,
        "out": run.out,
        "threads": run.threads,
        "precision": run.precision,
        "config": run.options,
        "versions": {
            "sbattn": pkg,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "artifacts": sorted(artifacts),
    }
    with open(os.path.join(run.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _model_from(options: dict, default_vocab: int = DEFAULT_VOCAB.size) -> ModelConfig:
    spec = options.get("model")
    if not isinstance(spec, dict):
        raise ConfigError("config needs a 'model' object")
    try:
        scheme = PositionScheme(**spec.get("scheme", {}))
        attn = AttentionConfig(
            n_head=int(spec.get("n_head", 1)),
            d_head=int(spec.get("d_head", 64)),
            variant=spec.get("variant", "sb"),
            scheme=scheme,
            group_norm=bool(spec.get("group_norm", False)),
            impl=spec.get("impl", "reference"),
            d_block=int(spec.get("d_block", 64)),
        )
        return ModelConfig(
            vocab_size=int(spec.get("vocab_size", default_vocab)),
            n_layer=int(spec.get("n_layer", 2)),
            d_inter=int(spec.get("d_inter", 2 * attn.d_model)),
            attn=attn,
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad model config: {err}") from err


def _corpus_text(spec, seed: int) -> str:
    """corpus: {"kind": "synthetic", "n_chars", "seed"} | {"kind": "file",
    "path"} | {"kind": "text", "text"}."""
    if not isinstance(spec, dict):
        raise ConfigError("config needs a 'corpus' object")
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        return synth_corpus(int(spec.get("n_chars", 200_000)),
                            int(spec.get("seed", seed)))
    if kind == "file":
        try:
            with open(spec["path"], encoding="latin-1") as fh:
                return fh.read()
        except (KeyError, OSError) as err:
            raise ConfigError(f"cannot read corpus file: {err}") from err
    if kind == "text":
        return str(spec.get("text", ""))
    raise ConfigError(f"unknown corpus kind {kind!r}")


def _fmt(x: float) -> str:
    return f"{x:.6e}"


# --- gradcheck --------------------------------------------------------------

KERNEL_TOL = 1e-6
LAYER_TOL = 1e-5


def _dot_loss(o, w) -> float:
    return float((o * w).sum())


def cmd_gradcheck(run: RunConfig) -> int:
    opts = run.options
    seeds = int(opts.get("seeds", 3))
    override = opts.get("tolerance")
    inject = opts.get("inject_fault")
    if inject not in (None, "dk_sign_flip"):
        raise ConfigError(f"unknown fault {inject!r}")
    base = Rng(run.seed)
    rows: list[tuple[str, float, float]] = []

    # stick-breaking kernel against finite differences
    for length, d in ((2, 1), (5, 4), (17, 8)):
        for s in range(seeds):
            rng = base.spawn(length, d, s)
            q, k, v, w = (rng.normal(length, d) for _ in range(4))
            _, cache = sb_forward(q, k, v)
            d_q, d_k, d_v = sb_backward(cache, w)
            if inject == "dk_sign_flip":
                d_k = -d_k
            for name, ana, x in (("d_q", d_q, q), ("d_k", d_k, k), ("d_v", d_v, v)):
                fd = finite_diff_grad(lambda _: _dot_loss(sb_forward(q, k, v)[0], w), x)
                rows.append((f"sb.{name} L{length} d{d} s{s}",
                             max_rel_err(ana, fd), KERNEL_TOL))

    # softmax baselines, one scheme each
    for kind in ("none", "rope", "alibi"):
        scheme = PositionScheme(kind=kind)
        rng = base.spawn(100, hash(kind) % 97)
        q, k, v, w = (rng.normal(6, 4) for _ in range(4))
        _, cache = softmax_attention(q, k, v, scheme)
        grads = softmax_attention_backward(cache, w)
        for name, ana, x in zip(("d_q", "d_k", "d_v"), grads, (q, k, v)):
            fd = finite_diff_grad(
                lambda _: _dot_loss(softmax_attention(q, k, v, scheme)[0], w), x)
            rows.append((f"softmax.{kind}.{name}", max_rel_err(ana, fd), KERNEL_TOL))

    # blocked kernels differentiate the same function they compute
    layout = plan_blocks(17, 8)
    for s in range(min(seeds, 2)):
        rng = base.spawn(200, s)
        q, k, v, w = (rng.normal(17, 8) for _ in range(4))
        o, acc, stats = blocked_forward(q, k, v, layout, two_phase=True)
        cache = make_cache(q, k, v, layout, acc, stats)
        fused = blocked_backward_fused(cache, w)
        two = blocked_backward_twophase(cache, w)[:3]
        for impl, grads in (("fused", fused), ("twophase", two)):
            for name, ana, x in zip(("d_q", "d_k", "d_v"), grads, (q, k, v)):
                fd = finite_diff_grad(
                    lambda _: _dot_loss(blocked_forward(q, k, v, layout)[0], w), x)
                rows.append((f"blocked.{impl}.{name} s{s}",
                             max_rel_err(ana, fd), KERNEL_TOL))

    # layers
    rng = base.spawn(300)
    x, g_w = rng.normal(6, 5), rng.normal(6, 5)
    g, b = 1.0 + 0.1 * rng.normal(1, 5)[0], 0.1 * rng.normal(1, 5)[0]
    _, cache = layer_norm(x, g, b)
    d_x, d_g, d_b = layer_norm_backward(cache, g_w)
    err = max(
        max_rel_err(d_x, finite_diff_grad(lambda _: _dot_loss(layer_norm(x, g, b)[0], g_w), x)),
        max_rel_err(d_g, finite_diff_grad(lambda _: _dot_loss(layer_norm(x, g, b)[0], g_w), g)),
        max_rel_err(d_b, finite_diff_grad(lambda _: _dot_loss(layer_norm(x, g, b)[0], g_w), b)),
    )
    rows.append(("layer_norm", err, LAYER_TOL))

    u, u_w = rng.normal(6, 5), rng.normal(6, 5)
    _, gcache = gelu(u)
    d_u = gelu_backward(gcache, u_w)
    rows.append(("gelu",
                 max_rel_err(d_u, finite_diff_grad(lambda _: _dot_loss(gelu(u)[0], u_w), u)),
                 LAYER_TOL))

    # full model, every parameter, three representative variants
    model_cases = (
        ("model.sb", "sb", False, PositionScheme()),
        ("model.sb_remainder_bias+gn", "sb_remainder_bias", True, PositionScheme()),
        ("model.softmax+rope", "softmax", False, PositionScheme(kind="rope")),
    )
    for label, variant, group_norm, scheme in model_cases:
        rows.append((label, _model_gradcheck(variant, group_norm, scheme, base.spawn(400)),
                     LAYER_TOL))

    tol_of = (lambda _t: float(override)) if override is not None else (lambda t: t)
    table = [(name, _fmt(err), _fmt(tol_of(tol)), "pass" if err < tol_of(tol) else "fail")
             for name, err, tol in rows]
    artifacts = [_write_csv(run, "gradcheck.csv",
                            ["component", "max_rel_err", "tolerance", "result"], table)]
    _write_manifest(run, artifacts)
    failures = sum(1 for r in table if r[3] == "fail")
    print(f"gradcheck: {len(table) - failures}/{len(table)} components pass")
    return 0 if failures == 0 else 1


def _model_gradcheck(variant, group_norm, scheme, rng: Rng) -> float:
    attn = AttentionConfig(n_head=2, d_head=8, variant=variant,
                           group_norm=group_norm, scheme=scheme)
    cfg = ModelConfig(vocab_size=11, n_layer=2, d_inter=12, attn=attn)
    params = init_params(cfg, rng)
    for key in params:
        if key.endswith(".r"):
            params[key] = 0.1 * rng.normal(*params[key].shape)
    tokens = rng.integers(0, cfg.vocab_size, size=6)
    targets = rng.integers(0, cfg.vocab_size, size=6)
    mask = np.ones(6, dtype=bool)

    def loss_fn(_=None) -> float:
        logits, _ = transformer_forward(tokens, params, cfg)
        return cross_entropy_masked(logits, targets, mask)[0]

    logits, cache = transformer_forward(tokens, params, cfg)
    _, d_logits = cross_entropy_masked(logits, targets, mask)
    grads = transformer_backward(cache, d_logits)
    return max(max_rel_err(grads[k], finite_diff_grad(loss_fn, params[k]))
               for k in params)


# --- equiv ------------------------------------------------------------------


def cmd_equiv(run: RunConfig) -> int:
    opts = run.options
    lengths = [int(x) for x in opts.get("lengths", (1, 7, 64, 100, 256, 512))]
    d_blocks = [int(x) for x in opts.get("d_blocks", (8, 16, 64))]
    d = int(opts.get("d", 16))
    f32 = run.precision == "f32"
    # 32-bit runs compare against the 64-bit reference, so the bound is
    # relative; 64-bit runs use the absolute max-abs contract
    tol_ref, tol_pair = (2e-3, 2e-3) if f32 else (1e-9, 1e-10)
    base = Rng(run.seed)
    header = ["L", "d_block", "skip", "diff_o", "fused_dq", "fused_dk", "fused_dv",
              "two_dq", "two_dk", "two_dv", "two_vs_fused", "result"]
    table = []
    worst = 0.0
    for length in lengths:
        rng = base.spawn(length)
        q64, k64, v64, w64 = (rng.normal(length, d) for _ in range(4))
        _, ref_cache = sb_forward(q64, k64, v64)
        o_ref = sb_forward(q64, k64, v64)[0]
        ref_grads = sb_backward(ref_cache, w64)
        for d_block in d_blocks:
            layout = plan_blocks(length, d_block)
            for skip in (False, True):
                q, k, v, w = ((m.astype(np.float32) if f32 else m)
                              for m in (q64, k64, v64, w64))
                o, acc, stats = blocked_forward(q, k, v, layout, skip=skip,
                                                two_phase=True, n_workers=run.threads)
                cache = make_cache(q, k, v, layout, acc, stats)
                fused = blocked_backward_fused(cache, w, n_workers=run.threads)
                two = blocked_backward_twophase(cache, w, n_workers=run.threads)[:3]
                if f32:
                    diff = lambda a, b: max_rel_err(a, b)
                else:
                    diff = lambda a, b: float(np.max(np.abs(np.asarray(a) - b))) if np.size(a) else 0.0
                diffs = [diff(o, o_ref)]
                diffs += [diff(fused[i], ref_grads[i]) for i in range(3)]
                diffs += [diff(two[i], ref_grads[i]) for i in range(3)]
                pair = max(diff(two[i], fused[i]) for i in range(3))
                passed = max(diffs) < tol_ref and pair < tol_pair
                worst = max(worst, max(diffs))
                table.append([length, d_block, "on" if skip else "off",
                              *[_fmt(x) for x in diffs], _fmt(pair),
                              "pass" if passed else "fail"])
    artifacts = [_write_csv(run, "equiv.csv", header, table)]
    _write_manifest(run, artifacts)
    failures = sum(1 for r in table if r[-1] == "fail")
    print(f"equiv: {len(table) - failures}/{len(table)} configurations pass "
          f"(worst diff {worst:.3e})")
    return 0 if failures == 0 else 1


# --- bench ------------------------------------------------------------------


def _saturating_inputs(length: int, d: int, rng: Rng):
    # every query puts logit 40 on the key one step behind it, so the stick
    # is used up immediately and all remaining tiles can be skipped
    q = np.zeros((length, d))
    k = np.zeros((length, d))
    for j in range(length):
        q[j, j % d] = 40.0 * math.sqrt(d)
    for i in range(length):
        k[i, (i + 1) % d] = 1.0
    return q, k, rng.normal(length, d)


def _dead_inputs(length: int, d: int, rng: Rng):
    # logit -100 everywhere: no key ever consumes the stick, nothing skips
    q = np.zeros((length, d))
    k = np.zeros((length, d))
    q[:, 0] = 100.0 * math.sqrt(d)
    k[:, 0] = -1.0
    return q, k, rng.normal(length, d)


def cmd_bench(run: RunConfig) -> int:
    opts = run.options
    lengths = [int(x) for x in opts.get("lengths", (256, 1024, 4096))]
    d_block = int(opts.get("d_block", 64))
    d = int(opts.get("d", 64))
    repeats = max(5, int(opts.get("repeats", 5)))
    warmups = int(opts.get("warmups", 2))
    input_kind = opts.get("input", "random")
    if input_kind not in ("random", "saturating", "dead"):
        raise ConfigError(f"unknown input kind {input_kind!r}")
    dtype = np.float32 if run.precision == "f32" else np.float64
    base = Rng(run.seed)
    table = []
    series: dict[str, tuple[list, list]] = {}
    for length in lengths:
        rng = base.spawn(length)
        if input_kind == "saturating":
            q, k, v = _saturating_inputs(length, d, rng)
        elif input_kind == "dead":
            q, k, v = _dead_inputs(length, d, rng)
        else:
            q, k, v = (rng.normal(length, d) for _ in range(3))
        w = rng.normal(length, d)
        layout = plan_blocks(length, d_block)
        for skip in (False, True):
            def pass_once():
                o, acc, stats = blocked_forward(q, k, v, layout, skip=skip,
                                                dtype=dtype, n_workers=run.threads)
                cache = make_cache(q, k, v, layout, acc, stats)
                blocked_backward_fused(cache, w, n_workers=run.threads)
                return stats
            for _ in range(warmups):
                stats = pass_once()
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                stats = pass_once()
                times.append((time.perf_counter() - t0) * 1e3)
            visited, skipped, _ = skip_stats(stats)
            med = statistics.median(times)
            table.append([length, d_block, "sb", "on" if skip else "off",
                          f"{med:.3f}", visited, skipped])
            label = f"skip {'on' if skip else 'off'}"
            series.setdefault(label, ([], []))[0].append(length)
            series[label][1].append(med)
    artifacts = [_write_csv(run, "bench.csv",
                            ["L", "d_block", "variant", "skip", "median_ms",
                             "tiles_visited", "tiles_skipped"], table)]
    artifacts.append(os.path.basename(plots.line_chart(
        os.path.join(run.out, "bench_median_ms.svg"), series,
        "sequence length", "median ms per forward+backward",
        f"tiled kernel, d_block={d_block}, {input_kind} inputs",
        logx=True, logy=True)))
    _write_manifest(run, artifacts)
    print(f"bench: {len(table)} rows over L={lengths}")
    return 0


# --- train ------------------------------------------------------------------


def _experiment_from(run: RunConfig) -> tuple[ExperimentSpec, SweepSpec]:
    opts = run.options
    task = dict(opts.get("task") or {})
    kind = task.pop("kind", None)
    if kind not in ("mqar", "mqrar", "charlm"):
        raise ConfigError("task.kind must be mqar, mqrar, or charlm")
    if kind == "charlm":
        task["text"] = _corpus_text(task.pop("corpus", None), run.seed)
        if "window" not in task:
            raise ConfigError("charlm task needs a window")
        default_vocab = 256  # byte-level
    else:
        default_vocab = task_vocab(task).size
    model = _model_from(opts, default_vocab)
    sweep_opts = opts.get("sweep") or {}
    try:
        sweep = SweepSpec(
            steps=int(sweep_opts.get("steps", 200)),
            batch_size=int(sweep_opts.get("batch_size", 64)),
            lrs=tuple(float(x) for x in sweep_opts.get("lrs", SweepSpec.lrs)),
            seeds=tuple(int(s) for s in sweep_opts.get("seeds", (run.seed,))),
        )
        spec = ExperimentSpec(
            kind=kind, model=model, task=task,
            weight_decay=float(opts.get("weight_decay",
                                        0.1 if kind == "charlm" else 0.0)),
            schedule=opts.get("schedule",
                              "warmup_cosine" if kind == "charlm" else "constant"),
            eval_size=int(opts.get("eval_size", 128)),
            eval_every=int(opts.get("eval_every", 25)),
            stop_at=opts.get("stop_at"),
            precision=run.precision,
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return spec, sweep


def cmd_train(run: RunConfig) -> int:
    spec, sweep = _experiment_from(run)
    report = run_sweep(spec, sweep)
    metric = report["metric"]
    artifacts = []
    series = {}
    for arm in report["arms"]:
        tag = f"lr{arm['lr']:.2e}_s{arm['seed']}"
        header = ["step", "lr", "loss"] + ([metric] if spec.kind != "charlm"
                                           else ["nll"])
        rows = [[m["step"], repr(m["lr"]), repr(m["loss"]),
                 repr(m[metric]) if metric in m else ""]
                for m in arm["metrics"]]
        artifacts.append(_write_csv(run, f"metrics_{tag}.csv", header, rows))
        curve = [(m["step"], m["loss" if spec.kind == "charlm" else "accuracy"])
                 for m in arm["metrics"]]
        if curve:
            series[tag] = ([c[0] for c in curve], [c[1] for c in curve])
    if series:
        ylabel = "training loss" if spec.kind == "charlm" else "held-out query accuracy"
        artifacts.append(os.path.basename(plots.line_chart(
            os.path.join(run.out, "train_curves.svg"), series, "step", ylabel,
            f"{spec.kind} sweep")))
    summary = {
        "kind": report["kind"],
        "metric": metric,
        "best": None,
        "arms": [{k: arm[k] for k in ("lr", "seed", "failed", "final")}
                 for arm in report["arms"]],
    }
    if report["best"] is not None:
        best = report["best"]
        summary["best"] = {k: best[k] for k in ("lr", "seed", "final")}
        save_params(best["params"], os.path.join(run.out, "best_params.json"))
        artifacts.append("best_params.json")
    with open(os.path.join(run.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    artifacts.append("summary.json")
    _write_manifest(run, artifacts)
    if report["best"] is None:
        print("train: every arm failed")
        return 1
    final = summary["best"]["final"]
    print(f"train: best arm lr={summary['best']['lr']:g} seed={summary['best']['seed']} "
          f"{metric}={final[metric]:.4f}")
    return 0


# --- eval_length ------------------------------------------------------------


def cmd_eval_length(run: RunConfig) -> int:
    opts = run.options
    model = _model_from(opts)
    text = _corpus_text(opts.get("corpus"), run.seed)
    l_train = int(opts.get("l_train", 128))
    factors = [int(f) for f in opts.get("factors", (1, 2, 4, 8))]
    if l_train < 2 or not factors:
        raise ConfigError("need l_train >= 2 and a non-empty factor list")
    longest = l_train * max(factors)
    if len(text) < longest + 1:
        raise ConfigError(f"corpus has {len(text)} chars; the longest "
                          f"evaluation window needs {longest + 1}")
    checkpoint = opts.get("checkpoint")
    if checkpoint:
        params = load_params(checkpoint)
    else:
        params = init_params(model, Rng(run.seed))
    rows = []
    lengths, nlls = [], []
    for factor in factors:
        l_eval = l_train * factor
        nll = batch_nll_at_length(params, model, text, l_eval,
                                  chunk=int(opts.get("chunk", 8)))
        rows.append([l_eval, repr(nll)])
        lengths.append(l_eval)
        nlls.append(nll)
    artifacts = [_write_csv(run, "eval_length.csv", ["l_eval", "nll"], rows)]
    artifacts.append(os.path.basename(plots.line_chart(
        os.path.join(run.out, "eval_length.svg"),
        {model.attn.variant: (lengths, nlls)},
        "evaluation length", "NLL (nats/byte)",
        f"trained at L={l_train}", logx=True)))
    _write_manifest(run, artifacts)
    print("eval_length: " + "  ".join(f"L={l}: {n:.4f}" for l, n in zip(lengths, nlls)))
    return 0


# --- dump_attn --------------------------------------------------------------


def _token_label(t: int, vocab=DEFAULT_VOCAB) -> str:
    if t < vocab.n_vars:
        return chr(ord("A") + t) if t < 26 else f"V{t}"
    lo, hi = vocab.val_range()
    if lo <= t < hi:
        return str(t - lo)
    if t == vocab.phi:
        return "phi"
    if t == vocab.filler:
        return "."
    return str(t)


def _instance_tokens(spec, seed: int) -> np.ndarray:
    if not isinstance(spec, dict):
        raise ConfigError("config needs an 'instance' object")
    if "tokens" in spec:
        return np.asarray(spec["tokens"], dtype=np.int64)
    if "fixture" in spec:
        try:
            instances = load_jsonl(spec["fixture"])
            return instances[int(spec.get("index", 0))].tokens
        except (OSError, IndexError) as err:
            raise ConfigError(f"cannot load fixture instance: {err}") from err
    kind = spec.get("kind")
    if kind == "mqar":
        return gen_mqar(int(spec.get("n_kv", 8)), int(spec.get("seed", seed))).tokens
    if kind == "mqrar":
        return gen_mqrar(int(spec.get("n_kv", 8)), int(spec.get("n_queries", 8)),
                         int(spec.get("seed", seed))).tokens
    raise ConfigError("instance needs tokens, a fixture, or kind mqar/mqrar")


def cmd_dump_attn(run: RunConfig) -> int:
    opts = run.options
    model = _model_from(opts)
    tokens = _instance_tokens(opts.get("instance"), run.seed)
    checkpoint = opts.get("checkpoint")
    params = load_params(checkpoint) if checkpoint else init_params(model, Rng(run.seed))
    _, cache = forward_batch(tokens[None, :], params, model)
    labels = None
    if model.vocab_size == DEFAULT_VOCAB.size:
        labels = [_token_label(int(t)) for t in tokens]
    artifacts = []
    sb_family = model.attn.variant != "softmax"
    for i, layer in enumerate(cache["layers"]):
        head_caches = layer[1]["heads"]
        for h, hc in enumerate(head_caches):
            inner = hc["inner"] if "inner" in hc else hc
            if sb_family:
                weights = inner["a"][0]
                rest = (inner["rest"][0] if inner["rest"] is not None
                        else 1.0 - weights.sum(axis=1))
            else:
                weights = inner["w"][0]
                rest = None
            length = weights.shape[0]
            header = [f"k{j}" for j in range(length)] + (["rest"] if sb_family else [])
            rows = []
            for j in range(length):
                row = [repr(float(x)) for x in weights[j]]
                if sb_family:
                    row.append(repr(float(rest[j])))
                rows.append(row)
            name = f"attn_l{i}_h{h}"
            artifacts.append(_write_csv(run, f"{name}.csv", header, rows))
            artifacts.append(os.path.basename(plots.heatmap(
                os.path.join(run.out, f"{name}.svg"), weights,
                title=f"layer {i} head {h} ({model.attn.variant})",
                tick_labels=labels)))
    _write_manifest(run, artifacts)
    print(f"dump_attn: wrote {model.n_layer} layers x {model.attn.n_head} heads "
          f"for a length-{len(tokens)} instance")
    return 0


# --- entry ------------------------------------------------------------------

COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "equiv": cmd_equiv,
    "bench": cmd_bench,
    "train": cmd_train,
    "eval_length": cmd_eval_length,
    "dump_attn": cmd_dump_attn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sb",
        description="stick-breaking attention verification and experiment harness")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default="sb_out", help="output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker count for the tiled kernels")
    parser.add_argument("--precision", choices=("f32", "f64"), default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = _resolve(args)
        os.makedirs(run.out, exist_ok=True)
        return COMMANDS[run.command](run)
    except ConfigError as err:
        print(f"sb {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
