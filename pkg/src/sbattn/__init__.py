"""Stick-breaking attention: stable log-space kernels, blocked execution,
a toy transformer with manual backprop, and recall / length-generalization
experiments.

Layout:
    numerics    dense-matrix helpers, stable scalar kernels, RNG, fd oracle
    attention   O(L^2) reference forward/backward, variants, softmax baselines
    blocked     tiled forward/backward with block skipping and two-phase mode
    model       toy decoder-only transformer, manual layer-by-layer backward
    tasks       MQAR/MQRAR generators, char-level corpus handling
    training    masked cross-entropy, Adam, LR sweeps
    cli         the `sb` command-line harness
"""

__version__ = "0.1.0"
