"""Seed-stream discipline for every stochastic operation in the package.

Each operation draws from its own numbered child stream of the user seed
(via ``numpy.random.SeedSequence`` spawn keys), so the draws one operation
sees can never depend on how many draws another operation consumed, on
iteration order, or on worker count.

Stream assignment:

== ==========================================================
0  model parameters (``sample_model``: loading, then factors)
1  hidden component states (``sample_dataset``)
2  per-variable categorical draws (``sample_dataset``)
3  outage masks (``sample_dataset``)
4  variational-state initialization (``vb``/``svi``)
5  minibatch index sampling (``svi``)
6  split shuffling (``data.split``)
7  hide-one entry selection (``data.hide_one``)
8  held-out column selection (``vb``/``svi`` convergence checks)
== ==========================================================
"""

from __future__ import annotations

import numpy as np

MODEL = 0
HIDDEN = 1
CATEGORICAL = 2
OUTAGE = 3
INIT = 4
MINIBATCH = 5
SPLIT = 6
HIDE = 7
HOLDOUT = 8


def substream(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream); same pair, same draws."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))
