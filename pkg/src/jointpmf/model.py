"""CPD-factored joint PMF representation, observation data, and samplers.

A joint PMF over N categorical variables is held in factored form: a
loading vector of component weights and one factor matrix per variable
whose columns are conditional PMFs.  Categories are 1-based; the value 0
encodes a missing observation throughout the package.

Models and datasets are immutable after construction (their arrays are
marked read-only), so all operations here are pure and thread-safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import rng

__all__ = [
    "CpdModel",
    "Dataset",
    "cpd_element",
    "observed_log_likelihood",
    "sample_model",
    "sample_dataset",
    "kruskal_max_rank",
    "save_model",
    "load_model",
    "model_to_json",
    "model_from_json",
]

SIMPLEX_ATOL = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _check_simplex(v: np.ndarray, what: str) -> None:
    if np.any(v < 0.0) or not np.all(np.isfinite(v)):
        raise ValueError(f"{what} must be nonnegative and finite")
    total = float(v.sum())
    if abs(total - 1.0) > SIMPLEX_ATOL:
        raise ValueError(f"{what} sums to {total!r}, expected 1 within {SIMPLEX_ATOL}")


@dataclass(frozen=True)
class CpdModel:
    """Joint PMF tensor in factored form.

    Attributes:
        cards: per-variable category counts (I_1, ..., I_N).
        loading: component weights, a length-R simplex vector.
        factors: per-variable (I_n, R) matrices; column r of factor n is
            the conditional PMF of variable n given hidden component r.
    """

    cards: tuple[int, ...]
    loading: np.ndarray
    factors: tuple[np.ndarray, ...]

    def __post_init__(self):
        cards = tuple(int(c) for c in self.cards)
        if len(cards) < 1 or any(c < 1 for c in cards):
            raise ValueError("cards must be positive integers")
        loading = np.asarray(self.loading, dtype=np.float64)
        if loading.ndim != 1 or loading.size < 1:
            raise ValueError("loading must be a non-empty vector")
        _check_simplex(loading, "loading")
        rank = loading.size
        factors = tuple(np.asarray(f, dtype=np.float64) for f in self.factors)
        if len(factors) != len(cards):
            raise ValueError("one factor matrix per variable required")
        for n, f in enumerate(factors):
            if f.shape != (cards[n], rank):
                raise ValueError(
                    f"factor {n} has shape {f.shape}, expected {(cards[n], rank)}"
                )
            for r in range(rank):
                _check_simplex(f[:, r], f"factor {n} column {r}")
        object.__setattr__(self, "cards", cards)
        object.__setattr__(self, "loading", _frozen(loading))
        object.__setattr__(self, "factors", tuple(_frozen(f) for f in factors))

    @property
    def num_vars(self) -> int:
        return len(self.cards)

    @property
    def rank(self) -> int:
        return self.loading.size


@dataclass(frozen=True)
class Dataset:
    """Categorical observations, one column per sample.

    ``y`` is an (N, T) integer matrix; row n takes values in
    {0, 1, ..., I_n} where 0 means the entry was not observed.
    """

    cards: tuple[int, ...]
    y: np.ndarray

    def __post_init__(self):
        cards = tuple(int(c) for c in self.cards)
        if len(cards) < 1 or any(c < 1 for c in cards):
            raise ValueError("cards must be positive integers")
        y = np.asarray(self.y)
        if not np.issubdtype(y.dtype, np.integer):
            y = y.astype(np.int32)
        if y.ndim != 2 or y.shape[0] != len(cards):
            raise ValueError(f"y must be ({len(cards)}, T), got {y.shape}")
        for n, c in enumerate(cards):
            row = y[n]
            if row.size and (row.min() < 0 or row.max() > c):
                raise ValueError(
                    f"row {n} contains values outside 0..{c} (0 = missing)"
                )
        object.__setattr__(self, "cards", cards)
        object.__setattr__(self, "y", _frozen(y.astype(np.int32)))

    @property
    def num_vars(self) -> int:
        return len(self.cards)

    @property
    def num_samples(self) -> int:
        return self.y.shape[1]


def cpd_element(model: CpdModel, index) -> float:
    """Probability of one joint realization (1-based index per variable)."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (model.num_vars,):
        raise ValueError(f"index must have length {model.num_vars}")
    for n, i in enumerate(idx):
        if not 1 <= i <= model.cards[n]:
            raise ValueError(f"index {i} out of range 1..{model.cards[n]} for variable {n}")
    w = model.loading.copy()
    for n, i in enumerate(idx):
        w *= model.factors[n][i - 1]
    return float(w.sum())


def observed_log_likelihood(model: CpdModel, y) -> float:
    """Log-probability of one (possibly partially observed) sample.

    Missing entries (value 0) are marginalized out, which for the factored
    model means their variables simply drop from the per-component product.
    An all-missing sample has probability 1 and returns exactly 0.0.
    """
    yv = np.asarray(y, dtype=np.int64)
    if yv.shape != (model.num_vars,):
        raise ValueError(f"sample must have length {model.num_vars}")
    for n, c in enumerate(yv):
        if not 0 <= c <= model.cards[n]:
            raise ValueError(f"value {c} out of range 0..{model.cards[n]} for variable {n}")
    if not np.any(yv > 0):
        return 0.0
    w = model.loading.copy()
    for n, c in enumerate(yv):
        if c > 0:
            w *= model.factors[n][c - 1]
    total = float(w.sum())
    if total <= 0.0:
        return -math.inf
    return math.log(total)


def sample_model(num_vars: int, cards, rank: int, seed: int) -> CpdModel:
    """Draw a random model: loading from U(0.3, 1), factors from U(0, 1).

    Both are normalized onto the simplex (1-norm).  Draw order within the
    model stream is fixed: loading first, then factor matrices for
    variables 0..N-1.
    """
    if num_vars < 1 or rank < 1:
        raise ValueError("num_vars and rank must be >= 1")
    cards = _broadcast_cards(cards, num_vars)
    if any(c < 2 for c in cards):
        raise ValueError("each variable needs at least 2 categories")
    g = rng.substream(seed, rng.MODEL)
    loading = g.uniform(0.3, 1.0, size=rank)
    loading /= loading.sum()
    factors = []
    for c in cards:
        f = g.uniform(0.0, 1.0, size=(c, rank))
        f /= f.sum(axis=0, keepdims=True)
        factors.append(f)
    return CpdModel(cards=cards, loading=loading, factors=tuple(factors))


def sample_dataset(model: CpdModel, num_samples: int, outage: float, seed: int) -> Dataset:
    """Sample observations from the model, then zero entries independently.

    For each sample a hidden component is drawn from the loading vector,
    each variable is drawn from that component's conditional PMF, and each
    entry is independently replaced by the missing code 0 with probability
    ``outage``.  Hidden states, categorical draws, and outage masks consume
    three disjoint seed streams.
    """
    if not 0.0 <= outage <= 1.0:
        raise ValueError("outage must lie in [0, 1]")
    if num_samples < 0:
        raise ValueError("num_samples must be nonnegative")
    n_vars, n_samp = model.num_vars, int(num_samples)
    hidden = rng.substream(seed, rng.HIDDEN)
    categorical = rng.substream(seed, rng.CATEGORICAL)
    outage_rng = rng.substream(seed, rng.OUTAGE)

    states = hidden.choice(model.rank, size=n_samp, p=model.loading)
    u = categorical.random((n_vars, n_samp))
    y = np.empty((n_vars, n_samp), dtype=np.int32)
    for n in range(n_vars):
        cum = np.cumsum(model.factors[n], axis=0)[:, states]
        y[n] = 1 + (u[n][None, :] > cum).sum(axis=0)
        np.minimum(y[n], model.cards[n], out=y[n])
    mask = outage_rng.random((n_vars, n_samp)) < outage
    y[mask] = 0
    return Dataset(cards=model.cards, y=y)


def kruskal_max_rank(num_vars: int, cards) -> int:
    """Largest R with sum_n min(I_n, R) >= 2R + (N - 1); 0 if none.

    This sufficient uniqueness condition is used only as an initial-rank
    heuristic.
    """
    if num_vars < 2:
        raise ValueError("num_vars must be >= 2")
    cards = _broadcast_cards(cards, num_vars)
    upper = (sum(cards) - num_vars + 1) // 2
    best = 0
    for r in range(1, max(upper, 0) + 1):
        if sum(min(c, r) for c in cards) >= 2 * r + num_vars - 1:
            best = r
    return best


def _broadcast_cards(cards, num_vars: int) -> tuple[int, ...]:
    if np.isscalar(cards):
        return (int(cards),) * num_vars
    out = tuple(int(c) for c in cards)
    if len(out) != num_vars:
        raise ValueError(f"expected {num_vars} cardinalities, got {len(out)}")
    return out


# -- JSON serialization -------------------------------------------------
#
# Reals are written with 17 significant digits, which round-trips float64
# exactly and keeps output byte-stable across runs.


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def model_to_json(model: CpdModel) -> str:
    parts = [
        '{"N":%d' % model.num_vars,
        ',"I":[%s]' % ",".join(str(c) for c in model.cards),
        ',"R":%d' % model.rank,
        ',"lambda":[%s]' % ",".join(_fmt(v) for v in model.loading),
        ',"factors":[',
    ]
    mats = []
    for f in model.factors:
        rows = ",".join("[%s]" % ",".join(_fmt(v) for v in row) for row in f)
        mats.append("[%s]" % rows)
    parts.append(",".join(mats))
    parts.append("]}")
    return "".join(parts)


def model_from_json(text: str) -> CpdModel:
    doc = json.loads(text)
    cards = tuple(int(c) for c in doc["I"])
    if int(doc["N"]) != len(cards):
        raise ValueError("N does not match the length of I")
    loading = np.asarray(doc["lambda"], dtype=np.float64)
    if int(doc["R"]) != loading.size:
        raise ValueError("R does not match the length of lambda")
    factors = tuple(np.asarray(f, dtype=np.float64) for f in doc["factors"])
    return CpdModel(cards=cards, loading=loading, factors=factors)


def save_model(model: CpdModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_to_json(model))
        fh.write("\n")


def load_model(path) -> CpdModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json(fh.read())
