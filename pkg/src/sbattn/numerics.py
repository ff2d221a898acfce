"""Dense float64 matrices, stable scalar kernels, seeded RNG, and the
finite-difference gradient oracle.

Matrices are plain 2-D numpy arrays, row-major, float64 on reference and test
paths (the blocked kernels accept float32 for benchmarking). Everything else
in the package builds on this module.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

Matrix = np.ndarray

# Branch point of the stabilized softplus. Above it log1p(exp(x)) is replaced
# by x itself; the absolute gap at the switch is log1p(exp(15)) - 15 < 4e-7.
SOFTPLUS_LINEAR_THRESHOLD = 15.0


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite function value."""


def _as_float_array(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def softplus_stable(x):
    """log(1 + exp(x)), switching to the identity for x > 15.

    The low branch uses log1p(exp(x)) (never 1 + exp(x) directly), so small
    inputs keep full precision and large ones cannot overflow. Scalars in,
    scalar out; arrays keep their float dtype.
    """
    arr = _as_float_array(x)
    if not np.all(np.isfinite(arr)):
        raise ValueError("softplus_stable requires finite input")
    clipped = np.minimum(arr, SOFTPLUS_LINEAR_THRESHOLD)
    out = np.where(arr <= SOFTPLUS_LINEAR_THRESHOLD, np.log1p(np.exp(clipped)), arr)
    if np.ndim(x) == 0:
        return float(out)
    return out


def sigmoid(x):
    """Logistic function, stable in both tails.

    Satisfies sigmoid(x) == exp(-softplus_stable(-x)) to ulp scale. Saturates
    to exactly 1.0 in float64 around x = 40, which downstream code relies on
    for constructing fully saturated attention.
    """
    arr = _as_float_array(x)
    if not np.all(np.isfinite(arr)):
        raise ValueError("sigmoid requires finite input")
    t = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    if np.ndim(x) == 0:
        return float(out)
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a pinned accumulation order.

    Each output entry accumulates over k = 0..K-1, one multiply then one add,
    so the result is bit-identical to a scalar triple loop, across runs and
    regardless of how callers parallelize around it. This is the oracle-path
    product; hot paths use `@` and are compared against it in tests.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D matrices")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for kk in range(a.shape[1]):
        out += a[:, kk : kk + 1] * b[kk : kk + 1, :]
    return out


def finite_diff_grad(f: Callable[[Matrix], float], x: Matrix, h: float = 1e-5) -> Matrix:
    """Central-difference gradient of scalar f at x, one entry at a time.

    This is the ground-truth oracle for every analytic backward in the
    package. x is perturbed in place and restored; f must recompute from its
    argument on each call. Raises OracleError naming the flat entry index if
    f comes back non-finite.
    """
    x = np.asarray(x, dtype=np.float64)
    if h <= 0:
        raise ValueError("h must be positive")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f(x)
        flat[idx] = orig - h
        fm = f(x)
        flat[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(
                f"non-finite oracle evaluation at entry {idx}: f(x+h)={fp}, f(x-h)={fm}"
            )
        gflat[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(approx, exact) -> float:
    """max |a - e| / max(1, |e|), the metric used by all gradient checks."""
    a = np.asarray(approx, dtype=np.float64)
    e = np.asarray(exact, dtype=np.float64)
    if a.shape != e.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {e.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - e) / np.maximum(1.0, np.abs(e))))


def max_abs_diff(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


class Rng:
    """Counter-based random stream (Philox) pinned by an integer seed.

    Identical seeds give identical streams across runs, platforms, and thread
    counts. Child streams come from spawn(*key): the ints are appended to the
    SeedSequence spawn key, so e.g. Rng(7).spawn(1, 3) names the same stream
    no matter who derives it or in which order. That tuple-mixing scheme is
    the package-wide convention for per-arm / per-step / per-instance seeds.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(int(t) for t in _key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(int(t) for t in key))

    def normal(self, rows: int, cols: int, std: float = 1.0) -> Matrix:
        return self.gen.normal(0.0, std, size=(rows, cols))

    def uniform(self, low: float, high: float, size=None):
        return self.gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, options, size=None, replace=True, p=None):
        return self.gen.choice(options, size=size, replace=replace, p=p)

    def shuffle(self, seq: list) -> None:
        # Fisher-Yates over a Python list; numpy shuffle would coerce dtypes.
        for i in range(len(seq) - 1, 0, -1):
            j = int(self.gen.integers(0, i + 1))
            seq[i], seq[j] = seq[j], seq[i]
