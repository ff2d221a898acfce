"""Adam training loop, masked cross-entropy, and seeded sweep execution
for the recall tasks and the byte-level LM length study.

Every arm of a sweep is a pure function of (spec, lr, seed): batches derive
per-step seeds from the arm seed via spawn keys, so reports regenerate
bit-identically. Arms that hit non-finite loss or gradients are recorded as
failed instead of aborting the sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .batched import backward_batch, forward_batch, logits_batch
from .model import ModelConfig, init_params, transformer_backward, transformer_forward
from .numerics import Matrix, Rng
from .tasks import (
    DEFAULT_VOCAB,
    Vocab,
    corpus_windows,
    eval_nll_at_length,
    eval_query_accuracy,
    gen_batch,
    gen_mqar,
    gen_mqrar,
    instance_seed,
    log_softmax,
)

DEFAULT_LRS = (1e-4, 10 ** (-10 / 3), 10 ** (-8 / 3), 1e-2)


class OptimError(RuntimeError):
    """Non-finite gradient; message names the parameter path."""


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0

    @classmethod
    def init(cls, params: dict, lr: float, **kw) -> "OptimState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0, lr=lr, **kw)


def cross_entropy_masked(logits: Matrix, targets, mask):
    """Mean NLL over masked positions plus the logit gradient: rows are
    (softmax - onehot)/n_masked where the mask is true, zero elsewhere."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no loss-masked positions")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(mask)[0]
    picked = z[rows, targets[rows]] - lse[rows, 0]
    loss = float(-picked.sum() / n)
    d_logits = np.zeros_like(logits)
    soft = np.exp(z[rows] - lse[rows])
    soft[np.arange(len(rows)), targets[rows]] -= 1.0
    d_logits[rows] = soft / n
    return loss, d_logits


def global_grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_grads(grads: dict, max_norm: float):
    """Scale all gradients by min(1, max_norm/norm); direction preserved."""
    norm = global_grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def adam_step(params: dict, grads: dict, state: OptimState) -> tuple[dict, OptimState]:
    """Bias-corrected Adam with decoupled weight decay on matrix-shaped
    parameters. Mutates params and state in place and returns them."""
    for path, g in grads.items():
        if not np.isfinite(g).all():
            raise OptimError(f"non-finite gradient at {path}")
    if state.clip_norm is not None:
        grads, _ = clip_grads(grads, state.clip_norm)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for path, p in params.items():
        g = grads[path]
        m = state.m[path]
        v = state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay and p.ndim == 2:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# --- schedules ------------------------------------------------------------


def constant_schedule(step: int, total: int) -> float:
    return 1.0


def warmup_cosine_schedule(step: int, total: int, warmup_frac: float = 0.05) -> float:
    """Linear ramp over the first warmup_frac of steps, cosine to zero."""
    warmup = max(1, int(round(total * warmup_frac)))
    if step < warmup:
        return (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


SCHEDULES = {"constant": constant_schedule, "warmup_cosine": warmup_cosine_schedule}


# --- experiment specs -----------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    steps: int
    batch_size: int = 64
    lrs: tuple = DEFAULT_LRS
    seeds: tuple = (0,)

    def __post_init__(self):
        if not self.lrs or not self.seeds:
            raise ValueError("sweep needs at least one lr and one seed")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ExperimentSpec:
    """What to train. kind selects the task; task holds its kwargs:
    mqar: n_kv; mqrar: n_kv, n_queries; both accept n_vars to widen the
    variable alphabet past the 26 defaults (needed once n_kv > 26); charlm:
    text, window, plus optional holdout_frac and stride."""
    kind: str
    model: ModelConfig
    task: dict = field(default_factory=dict)
    weight_decay: float = 0.0
    schedule: str = "constant"
    eval_size: int = 128
    eval_every: int = 25
    stop_at: float | None = None  # early-exit accuracy for synthetic tasks
    precision: str = "f64"

    def __post_init__(self):
        if self.kind not in ("mqar", "mqrar", "charlm"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}")


def model_fn(params: dict, cfg: ModelConfig):
    return lambda tokens: transformer_forward(tokens, params, cfg)[0]


def _stackable(instances, cfg: ModelConfig) -> bool:
    """The batched path needs the reference attention, one shared length,
    and one shared mask count (so flat mean == mean of instance means)."""
    if cfg.attn.impl != "reference":
        return False
    length = len(instances[0].tokens)
    count = int(instances[0].loss_mask.sum())
    return all(len(i.tokens) == length and int(i.loss_mask.sum()) == count
               for i in instances)


def batch_loss_and_grads(params: dict, cfg: ModelConfig, instances):
    """Mean loss over masked positions of the batch plus summed gradients.
    Uses the batch-stacked fast path when instances are uniform, otherwise
    falls back to one model call per instance."""
    if _stackable(instances, cfg):
        toks = np.stack([i.tokens for i in instances])
        targets = np.stack([i.targets for i in instances])
        mask = np.stack([i.loss_mask for i in instances])
        logits, cache = forward_batch(toks, params, cfg)
        b, length, vocab = logits.shape
        loss, d_flat = cross_entropy_masked(logits.reshape(b * length, vocab),
                                            targets.reshape(-1), mask.reshape(-1))
        return loss, backward_batch(cache, d_flat.reshape(b, length, vocab))
    scale = 1.0 / len(instances)
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for inst in instances:
        logits, cache = transformer_forward(inst.tokens, params, cfg)
        loss, d_logits = cross_entropy_masked(logits, inst.targets, inst.loss_mask)
        total += loss * scale
        for k, g in transformer_backward(cache, d_logits * scale).items():
            if k in grads:
                grads[k] += g
            else:
                grads[k] = g
    return total, grads


def batch_accuracy(params: dict, cfg: ModelConfig, instances, vocab=DEFAULT_VOCAB) -> float:
    """eval_query_accuracy semantics on the fast path when possible."""
    if not _stackable(instances, cfg):
        return eval_query_accuracy(model_fn(params, cfg), instances, vocab)
    toks = np.stack([i.tokens for i in instances])
    logits = logits_batch(toks, params, cfg)
    lo, hi = vocab.val_range()
    pred = lo + logits[..., lo:hi].argmax(axis=2)
    mask = np.stack([i.loss_mask for i in instances])
    targets = np.stack([i.targets for i in instances])
    return float((pred[mask] == targets[mask]).sum() / mask.sum())


def batch_nll_at_length(params: dict, cfg: ModelConfig, text, l_eval: int,
                        chunk: int = 8) -> float:
    """eval_nll_at_length on the fast path: non-overlapping windows scored
    a chunk at a time to bound the (chunk, L, L) attention memory."""
    if cfg.attn.impl != "reference":
        return eval_nll_at_length(model_fn(params, cfg), text, l_eval)
    if l_eval < 2:
        raise ValueError("evaluation length must be at least 2")
    windows = corpus_windows(text, l_eval, l_eval)
    total = 0.0
    count = 0
    for i in range(0, len(windows), chunk):
        part = windows[i:i + chunk]
        toks = np.stack([w.tokens for w in part])
        targets = np.stack([w.targets for w in part])
        lp = log_softmax(logits_batch(toks, params, cfg))
        b, length = targets.shape
        rows = np.arange(b)[:, None], np.arange(length)[None, :]
        total += float(-lp[rows[0], rows[1], targets].sum())
        count += b * length
    return total / count


def task_vocab(task: dict) -> Vocab:
    """Vocabulary for a synthetic-task spec; n_vars widens the alphabet."""
    n_vars = task.get("n_vars")
    return Vocab(n_vars=int(n_vars)) if n_vars is not None else DEFAULT_VOCAB


def _synthetic_generator(spec: ExperimentSpec):
    t = spec.task
    vocab = task_vocab(t)
    if spec.kind == "mqar":
        return lambda seed: gen_mqar(t["n_kv"], seed, vocab=vocab,
                                     pad_to=t.get("pad_to"))
    return lambda seed: gen_mqrar(t["n_kv"], t["n_queries"], seed,
                                  vocab=vocab, pad_to=t.get("pad_to"))


def train_one(spec: ExperimentSpec, sweep: SweepSpec, lr: float, seed: int) -> dict:
    """One arm. Returns {lr, seed, failed, metrics, final, params}; metrics
    rows are {step, lr, loss, accuracy|nll}."""
    if spec.kind == "charlm":
        return _train_charlm(spec, sweep, lr, seed)
    return _train_synthetic(spec, sweep, lr, seed)


def _train_synthetic(spec: ExperimentSpec, sweep: SweepSpec, lr: float, seed: int) -> dict:
    gen = _synthetic_generator(spec)
    vocab = task_vocab(spec.task)
    if spec.model.vocab_size < vocab.size:
        raise ValueError(f"model vocab_size {spec.model.vocab_size} is smaller "
                         f"than the task vocabulary ({vocab.size})")
    params = init_params(spec.model, Rng(seed), dtype=PRECISIONS[spec.precision])
    state = OptimState.init(params, lr, weight_decay=spec.weight_decay)
    schedule = SCHEDULES[spec.schedule]
    # batches use spawn key (0, step); the held-out eval set uses (1,)
    eval_set = gen_batch(gen, spec.eval_size, seed=instance_seed(seed, 1))
    metrics: list[dict] = []
    failed = None
    accuracy = None
    for step in range(sweep.steps):
        batch = gen_batch(gen, sweep.batch_size, seed=instance_seed(seed, 0, step))
        try:
            loss, grads = batch_loss_and_grads(params, spec.model, batch)
            if not math.isfinite(loss):
                raise OptimError(f"non-finite loss at step {step}")
            state.lr = lr * schedule(step, sweep.steps)
            adam_step(params, grads, state)
        except (OptimError, FloatingPointError) as err:
            failed = str(err)
            break
        last = step == sweep.steps - 1
        if step % spec.eval_every == spec.eval_every - 1 or last:
            accuracy = batch_accuracy(params, spec.model, eval_set, vocab)
            metrics.append({"step": step + 1, "lr": state.lr, "loss": loss,
                            "accuracy": accuracy})
            if spec.stop_at is not None and accuracy >= spec.stop_at:
                break
    final = {"accuracy": accuracy if accuracy is not None else 0.0,
             "steps_run": state.step}
    return {"lr": lr, "seed": seed, "failed": failed, "metrics": metrics,
            "final": final, "params": params}


def _train_charlm(spec: ExperimentSpec, sweep: SweepSpec, lr: float, seed: int) -> dict:
    t = spec.task
    text = t["text"]
    window = t["window"]
    holdout_frac = t.get("holdout_frac", 0.1)
    split = int(len(text) * (1.0 - holdout_frac))
    train_text, holdout = text[:split], text[split:]
    pool = corpus_windows(train_text, window, t.get("stride", window))
    params = init_params(spec.model, Rng(seed), dtype=PRECISIONS[spec.precision])
    state = OptimState.init(params, lr, weight_decay=spec.weight_decay)
    schedule = SCHEDULES[spec.schedule]
    picker = Rng(seed, (2,))
    metrics: list[dict] = []
    failed = None
    for step in range(sweep.steps):
        idx = picker.integers(0, len(pool), size=sweep.batch_size)
        batch = [pool[int(i)] for i in idx]
        try:
            loss, grads = batch_loss_and_grads(params, spec.model, batch)
            if not math.isfinite(loss):
                raise OptimError(f"non-finite loss at step {step}")
            state.lr = lr * schedule(step, sweep.steps)
            adam_step(params, grads, state)
        except (OptimError, FloatingPointError) as err:
            failed = str(err)
            break
        if step % spec.eval_every == spec.eval_every - 1 or step == sweep.steps - 1:
            metrics.append({"step": step + 1, "lr": state.lr, "loss": loss})
    nll = None
    if failed is None:
        nll = batch_nll_at_length(params, spec.model, holdout, window)
        if metrics:
            metrics[-1]["nll"] = nll
    final = {"nll": nll if nll is not None else float("inf"),
             "steps_run": state.step}
    return {"lr": lr, "seed": seed, "failed": failed, "metrics": metrics,
            "final": final, "params": params, "holdout": holdout}


def run_sweep(spec: ExperimentSpec, sweep: SweepSpec) -> dict:
    """Train every (lr, seed) arm, pick the best finished arm by the task
    metric (accuracy up, NLL down). Arms are merged in sorted key order so
    the report layout never depends on execution order."""
    arms = {}
    for lr in sweep.lrs:
        for seed in sweep.seeds:
            arms[(lr, seed)] = train_one(spec, sweep, lr, seed)
    ordered = [arms[k] for k in sorted(arms)]
    maximize = spec.kind != "charlm"
    metric = "accuracy" if maximize else "nll"
    finished = [a for a in ordered if a["failed"] is None]
    best = None
    if finished:
        key = lambda a: a["final"][metric]
        best = max(finished, key=key) if maximize else min(finished, key=key)
    return {"kind": spec.kind, "metric": metric, "arms": ordered, "best": best}
