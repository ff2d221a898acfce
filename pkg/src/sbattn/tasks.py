"""Synthetic recall tasks and byte-level language-model corpus handling.

Two generators:
    gen_mqar    multi-query associative recall: n_kv distinct (variable,
                value) assignments, then every variable queried once in
                random order.
    gen_mqrar   repeated associative recall: after the initial assignments,
                each step queries a variable (the target is its value at
                that moment) and immediately reassigns it.

Targets use a designated null id at positions where no loss is computed.
Generation is a pure function of (parameters, seed); batch helpers derive
per-instance streams as Rng(seed).spawn(index) so any slice of a batch can
be regenerated independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import Matrix, Rng


@dataclass(frozen=True)
class Vocab:
    """Token id layout for the recall tasks.

    ids [0, n_vars) are variable symbols, [n_vars, n_vars+n_vals) are value
    symbols, then the null-target id (phi) and an optional neutral filler.
    """

    n_vars: int = 26
    n_vals: int = 10

    def __post_init__(self):
        if self.n_vars < 1 or self.n_vals < 2:
            raise ValueError("need at least one variable and two values")

    @property
    def phi(self) -> int:
        return self.n_vars + self.n_vals

    @property
    def filler(self) -> int:
        return self.phi + 1

    @property
    def size(self) -> int:
        return self.n_vars + self.n_vals + 2

    def var_id(self, i: int) -> int:
        return int(i)

    def val_id(self, v: int) -> int:
        return self.n_vars + int(v)

    def val_range(self) -> tuple[int, int]:
        return self.n_vars, self.n_vars + self.n_vals


DEFAULT_VOCAB = Vocab()


@dataclass
class TaskInstance:
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if not (len(self.tokens) == len(self.targets) == len(self.loss_mask)):
            raise ValueError("tokens, targets, loss_mask must share a length")

    def to_json(self) -> str:
        return json.dumps({
            "tokens": self.tokens.tolist(),
            "targets": self.targets.tolist(),
            "loss_mask": [int(b) for b in self.loss_mask],
            "meta": self.meta,
        })

    @classmethod
    def from_json(cls, line: str) -> "TaskInstance":
        d = json.loads(line)
        return cls(d["tokens"], d["targets"], [bool(b) for b in d["loss_mask"]],
                   d.get("meta", {}))


def save_jsonl(instances, path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(inst.to_json() + "\n")


def load_jsonl(path) -> list[TaskInstance]:
    with open(path) as fh:
        return [TaskInstance.from_json(line) for line in fh if line.strip()]


# --- recall task generators ----------------------------------------------


def _pad(tokens, targets, mask, pad_to, vocab):
    if pad_to is None or pad_to <= len(tokens):
        return tokens, targets, mask
    extra = pad_to - len(tokens)
    tokens = tokens + [vocab.filler] * extra
    targets = targets + [vocab.phi] * extra
    mask = mask + [False] * extra
    return tokens, targets, mask


def gen_mqar(n_kv: int, seed: int, vocab: Vocab = DEFAULT_VOCAB,
             pad_to: int | None = None) -> TaskInstance:
    """n_kv distinct assignments, then each variable queried once. The
    target at a queried variable token is its assigned value; everywhere
    else the null id. Length 3*n_kv before optional filler padding."""
    if not 1 <= n_kv <= vocab.n_vars:
        raise ValueError(f"n_kv must be in [1, {vocab.n_vars}]")
    rng = Rng(seed)
    vars_ = rng.choice(vocab.n_vars, size=n_kv, replace=False)
    vals = rng.integers(0, vocab.n_vals, size=n_kv)
    assigned = {int(v): vocab.val_id(x) for v, x in zip(vars_, vals)}
    tokens, targets, mask = [], [], []
    for v, x in zip(vars_, vals):
        tokens += [int(v), vocab.val_id(x)]
        targets += [vocab.phi, vocab.phi]
        mask += [False, False]
    for v in vars_[rng.permutation(n_kv)]:
        tokens.append(int(v))
        targets.append(assigned[int(v)])
        mask.append(True)
    tokens, targets, mask = _pad(tokens, targets, mask, pad_to, vocab)
    return TaskInstance(tokens, targets, mask,
                        {"task": "mqar", "n_kv": n_kv, "n_queries": n_kv, "seed": seed})


def gen_mqrar(n_kv: int, n_queries: int, seed: int, vocab: Vocab = DEFAULT_VOCAB,
              pad_to: int | None = None) -> TaskInstance:
    """Assignments, then n_queries (query, reassign) pairs. The target at
    each query token is the variable's value before the reassignment that
    follows it. With n_kv >= 2 a step never queries the variable assigned
    immediately before it, so every retrieval crosses a distractor token.
    Length 2*(n_kv + n_queries) before optional padding."""
    if not 1 <= n_kv <= vocab.n_vars:
        raise ValueError(f"n_kv must be in [1, {vocab.n_vars}]")
    if n_queries < 1:
        raise ValueError("n_queries must be positive")
    rng = Rng(seed)
    vars_ = [int(v) for v in rng.choice(vocab.n_vars, size=n_kv, replace=False)]
    current: dict[int, int] = {}
    tokens, targets, mask = [], [], []
    for v in vars_:
        val = vocab.val_id(rng.integers(0, vocab.n_vals))
        current[v] = val
        tokens += [v, val]
        targets += [vocab.phi, vocab.phi]
        mask += [False, False]
    last_assigned = vars_[-1]
    for _ in range(n_queries):
        if n_kv >= 2:
            pool = [v for v in vars_ if v != last_assigned]
            var = pool[rng.integers(0, len(pool))]
        else:
            var = vars_[0]
        new_val = vocab.val_id(rng.integers(0, vocab.n_vals))
        tokens += [var, new_val]
        targets += [current[var], vocab.phi]
        mask += [True, False]
        current[var] = new_val
        last_assigned = var
    tokens, targets, mask = _pad(tokens, targets, mask, pad_to, vocab)
    return TaskInstance(tokens, targets, mask,
                        {"task": "mqrar", "n_kv": n_kv, "n_queries": n_queries,
                         "seed": seed})


def mqrar_targets(tokens, n_kv: int, vocab: Vocab = DEFAULT_VOCAB):
    """Replay the assignment dictionary over an existing token sequence laid
    out as n_kv assignment pairs then (query, reassign) pairs. Returns
    (targets, loss_mask); used to cross-check hand-built sequences."""
    tokens = np.asarray(tokens)
    if len(tokens) < 2 * n_kv or len(tokens) % 2:
        raise ValueError("sequence must hold whole pairs incl. the prefix")
    current: dict[int, int] = {}
    targets = np.full(len(tokens), vocab.phi, dtype=np.int64)
    mask = np.zeros(len(tokens), dtype=bool)
    for p in range(0, len(tokens), 2):
        var, val = int(tokens[p]), int(tokens[p + 1])
        if p >= 2 * n_kv:
            targets[p] = current[var]
            mask[p] = True
        current[var] = val
    return targets, mask


def instance_seed(seed: int, *key: int) -> int:
    """Derived seed under spawn key `key`: the first draw of the stream
    Rng(seed).spawn(*key), folded back into a plain int so generators stay
    pure functions of (parameters, seed). Stable across batch sizes and
    generation order; batches use a single index, training uses (0, step)."""
    return int(Rng(seed).spawn(*key).gen.integers(0, 2 ** 63 - 1))


def gen_batch(gen, n: int, seed: int, **kw) -> list[TaskInstance]:
    return [gen(seed=instance_seed(seed, i), **kw) for i in range(n)]


def eval_query_accuracy(model, instances, vocab: Vocab = DEFAULT_VOCAB) -> float:
    """Fraction of loss-masked positions whose argmax logit (over value ids
    only; the tasks never ask for other symbols) equals the target."""
    if not instances:
        raise ValueError("need at least one instance")
    lo, hi = vocab.val_range()
    hits = total = 0
    for inst in instances:
        logits = model(inst.tokens)
        pred = lo + np.argmax(logits[:, lo:hi], axis=1)
        m = inst.loss_mask
        hits += int((pred[m] == inst.targets[m]).sum())
        total += int(m.sum())
    if total == 0:
        raise ValueError("no loss-masked positions")
    return hits / total


# --- byte-level corpus ----------------------------------------------------

BYTE_VOCAB = 256


def corpus_windows(text, window: int, stride: int, seed: int | None = None) -> list[TaskInstance]:
    """Slice a byte stream into next-byte-prediction windows. A window needs
    window+1 bytes, so starts run 0, stride, ... while start <= N-window-1,
    giving floor((N-1-window)/stride)+1 windows. A seed shuffles the order;
    loss is computed at every position."""
    data = np.frombuffer(text.encode("utf-8") if isinstance(text, str) else bytes(text),
                         dtype=np.uint8).astype(np.int64)
    n = len(data)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if n < window + 1:
        raise ValueError(f"corpus has {n} bytes, needs at least {window + 1}")
    starts = np.arange(0, n - window, stride)
    if seed is not None:
        starts = starts[Rng(seed).permutation(len(starts))]
    return [TaskInstance(data[s:s + window], data[s + 1:s + window + 1],
                         np.ones(window, dtype=bool), {"start": int(s)})
            for s in starts]


def log_softmax(logits: Matrix) -> Matrix:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def eval_nll_at_length(model, text, l_eval: int) -> float:
    """Mean per-token negative log-likelihood in nats over non-overlapping
    windows of l_eval bytes from a held-out stream."""
    if l_eval < 2:
        raise ValueError("evaluation length must be at least 2")
    windows = corpus_windows(text, l_eval, l_eval)
    total = 0.0
    count = 0
    for w in windows:
        lp = log_softmax(model(w.tokens))
        total += float(-lp[np.arange(len(w.tokens)), w.targets].sum())
        count += len(w.tokens)
    return total / count


# --- deterministic pseudo-text -------------------------------------------

_ONSETS = ["b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v",
           "th", "sh", "ch", "st", "br", "tr", "gr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "n", "r", "s", "t", "l", "nd", "st", "ck"]


def _make_word(rng: Rng) -> str:
    n_syll = 1 + int(rng.integers(0, 3))
    parts = []
    for _ in range(n_syll):
        parts.append(_ONSETS[int(rng.integers(0, len(_ONSETS)))]
                     + _VOWELS[int(rng.integers(0, len(_VOWELS)))]
                     + _CODAS[int(rng.integers(0, len(_CODAS)))])
    return "".join(parts)


def synth_corpus(n_chars: int, seed: int, lexicon_size: int = 240) -> str:
    """Deterministic pseudo-text for the language-model experiments: a
    Zipf-weighted lexicon of pronounceable words arranged into sentences
    and paragraphs, with quoted spans whose closing mark must be recalled
    across several words. Local structure is learnable by a small model
    while the quote/sentence state adds a longer-range signal."""
    rng = Rng(seed)
    lexicon = []
    seen = set()
    while len(lexicon) < lexicon_size:
        w = _make_word(rng)
        if w not in seen:
            seen.add(w)
            lexicon.append(w)
    ranks = np.arange(1, lexicon_size + 1, dtype=np.float64)
    weights = 1.0 / ranks
    weights /= weights.sum()

    out: list[str] = []
    size = 0
    sentence_pos = 0  # words since sentence start
    sentence_len = 0
    quote_left = 0  # words until an open quote closes
    para_left = int(rng.integers(3, 8))  # sentences until paragraph break

    def emit(s: str):
        nonlocal size
        out.append(s)
        size += len(s)

    def next_word() -> str:
        return str(rng.choice(lexicon, p=weights))

    while size < n_chars:
        if sentence_pos == 0:
            sentence_len = int(rng.integers(4, 12))
            w = next_word()
            emit(w.capitalize())
        else:
            emit(" ")
            if quote_left == 0 and rng.uniform(0.0, 1.0) < 0.08:
                quote_left = int(rng.integers(2, 6))
                emit('"')
            emit(next_word())
            if quote_left > 0:
                quote_left -= 1
                if quote_left == 0:
                    emit('"')
        sentence_pos += 1
        if sentence_pos >= sentence_len:
            if quote_left > 0:
                emit('"')
                quote_left = 0
            sentence_pos = 0
            para_left -= 1
            if para_left <= 0:
                emit(".\n\n")
                para_left = int(rng.integers(3, 8))
            else:
                emit(". ")
    return "".join(out)[:n_chars]
