"""Dataset ingestion, rating-log preprocessing, and split protocols.

Two file formats are understood:

* Dense categorical CSV: one sample per row, comma-separated integers with
  0 for missing, optionally preceded by a ``#I=c1,c2,...`` line declaring
  cardinalities.
* Ratings CSV: a ``userId,movieId,rating[,timestamp]`` header followed by
  one rating per line (timestamps ignored).

All randomized operations are deterministic given their seed.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import rng
from .model import Dataset

__all__ = [
    "ParseError",
    "SplitSpec",
    "RatingsIngestSpec",
    "HALF_STAR_SCALE",
    "load_dense_csv",
    "save_dense_csv",
    "read_ratings_csv",
    "ingest_ratings",
    "ingest_ratings_csv",
    "split",
    "split_manifest",
    "hide_one",
]

# MovieLens-style 5-star scale with half-star increments, mapped to 1..10.
HALF_STAR_SCALE = tuple(0.5 * k for k in range(1, 11))


class ParseError(ValueError):
    """Malformed input file or rating stream."""


@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test partition of the observed entries."""

    train_fraction: float
    validation_fraction: float
    test_fraction: float
    split_unit: str = "per_rating"
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.validation_fraction, self.test_fraction)
        if any(f < 0.0 or f > 1.0 for f in fracs):
            raise ValueError("fractions must lie in [0, 1]")
        if abs(sum(fracs) - 1.0) > 1e-12:
            raise ValueError("fractions must sum to 1")
        if self.split_unit not in ("per_rating", "per_column"):
            raise ValueError("split_unit must be 'per_rating' or 'per_column'")


@dataclass(frozen=True)
class RatingsIngestSpec:
    """How to turn a rating log into a categorical item-by-user matrix.

    ``rating_map`` lists the admissible raw values in increasing order;
    position k maps to category k+1.
    """

    top_n_items: int
    min_rated_items: int = 2
    rating_map: tuple[float, ...] = HALF_STAR_SCALE

    def __post_init__(self):
        if self.top_n_items < 1:
            raise ValueError("top_n_items must be >= 1")
        if self.min_rated_items < 1:
            raise ValueError("min_rated_items must be >= 1")
        values = tuple(float(v) for v in self.rating_map)
        if len(values) < 1 or len(set(values)) != len(values):
            raise ValueError("rating_map must be non-empty and injective")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError("rating_map must be strictly increasing")
        object.__setattr__(self, "rating_map", values)


def load_dense_csv(path) -> Dataset:
    """Read a dense categorical CSV into a Dataset.

    Cardinalities come from a ``#I=...`` header when present, otherwise
    each variable's cardinality is the maximum category observed in its
    column.  Negative values, non-integers, ragged rows, and values above
    a declared cardinality are parse errors with row/column locations.
    """
    declared = None
    rows: list[list[int]] = []
    n_cols = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                if text.startswith("#I="):
                    try:
                        declared = tuple(int(c) for c in text[3:].split(","))
                    except ValueError:
                        raise ParseError(f"line {lineno}: bad cardinality header {text!r}")
                    if any(c < 1 for c in declared):
                        raise ParseError(f"line {lineno}: cardinalities must be positive")
                continue
            fields = text.split(",")
            if n_cols is None:
                n_cols = len(fields)
            elif len(fields) != n_cols:
                raise ParseError(
                    f"line {lineno}: expected {n_cols} columns, found {len(fields)}"
                )
            row = []
            for j, tok in enumerate(fields):
                try:
                    v = int(tok)
                except ValueError:
                    raise ParseError(f"line {lineno}, column {j + 1}: {tok!r} is not an integer")
                if v < 0:
                    raise ParseError(f"line {lineno}, column {j + 1}: negative value {v}")
                row.append(v)
            rows.append(row)
    if n_cols is None:
        raise ParseError(f"{path}: no data rows")
    y = np.asarray(rows, dtype=np.int32).T  # file rows are samples
    if declared is not None:
        if len(declared) != n_cols:
            raise ParseError(
                f"header declares {len(declared)} cardinalities for {n_cols} columns"
            )
        cards = declared
        for n, c in enumerate(cards):
            bad = np.flatnonzero(y[n] > c)
            if bad.size:
                raise ParseError(
                    f"line {int(bad[0]) + 1} (data), column {n + 1}: value "
                    f"{int(y[n, bad[0]])} exceeds declared cardinality {c}"
                )
    else:
        cards = tuple(max(1, int(y[n].max())) for n in range(n_cols))
    return Dataset(cards=cards, y=y)


def save_dense_csv(data: Dataset, path, declare_cards: bool = True) -> None:
    """Write a Dataset as dense CSV (one sample per row); round-trips
    through ``load_dense_csv`` exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        if declare_cards:
            fh.write("#I=" + ",".join(str(c) for c in data.cards) + "\n")
        for t in range(data.num_samples):
            fh.write(",".join(str(int(v)) for v in data.y[:, t]) + "\n")


def read_ratings_csv(path):
    """Yield (user, item, rating) triples from a ratings CSV."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3:
            raise ParseError(f"{path}: missing userId,movieId,rating header")
        for lineno, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) < 3:
                raise ParseError(f"line {lineno}: expected at least 3 fields")
            try:
                yield int(fields[0]), int(fields[1]), float(fields[2])
            except ValueError:
                raise ParseError(f"line {lineno}: bad rating triple {fields[:3]!r}")


def ingest_ratings(triples, spec: RatingsIngestSpec) -> Dataset:
    """Build an item-by-user categorical Dataset from rating triples.

    Keeps the ``top_n_items`` items with the most ratings (ties broken by
    ascending item id), drops users rating fewer than ``min_rated_items``
    of them, and maps raw values through ``rating_map``.  Rows are ordered
    by the item selection order, columns by ascending user id.  If a user
    rates the same item twice, the later triple wins.
    """
    triples = list(triples) if not isinstance(triples, (list, tuple)) else triples
    category = {v: k + 1 for k, v in enumerate(spec.rating_map)}

    counts: dict = {}
    for _, item, _ in triples:
        counts[item] = counts.get(item, 0) + 1
    if not counts:
        raise ParseError("rating stream is empty")
    ranked = sorted(counts, key=lambda it: (-counts[it], it))
    selected = ranked[: spec.top_n_items]
    item_row = {it: n for n, it in enumerate(selected)}

    by_user: dict = {}
    for user, item, raw in triples:
        n = item_row.get(item)
        if n is None:
            continue
        cat = category.get(float(raw))
        if cat is None:
            raise ParseError(f"rating value {raw!r} is not in the rating map")
        by_user.setdefault(user, {})[n] = cat

    users = sorted(u for u, items in by_user.items() if len(items) >= spec.min_rated_items)
    y = np.zeros((len(selected), len(users)), dtype=np.int32)
    for t, user in enumerate(users):
        for n, cat in by_user[user].items():
            y[n, t] = cat
    cards = (len(spec.rating_map),) * len(selected)
    return Dataset(cards=cards, y=y)


def ingest_ratings_csv(path, spec: RatingsIngestSpec) -> Dataset:
    """Two-pass streaming ingest of a ratings CSV (no full-file buffering
    beyond the output matrix)."""
    category = {v: k + 1 for k, v in enumerate(spec.rating_map)}

    counts: dict = {}
    for _, item, _ in read_ratings_csv(path):
        counts[item] = counts.get(item, 0) + 1
    if not counts:
        raise ParseError(f"{path}: no ratings")
    ranked = sorted(counts, key=lambda it: (-counts[it], it))
    selected = ranked[: spec.top_n_items]
    item_row = {it: n for n, it in enumerate(selected)}

    by_user: dict = {}
    for user, item, raw in read_ratings_csv(path):
        n = item_row.get(item)
        if n is None:
            continue
        cat = category.get(float(raw))
        if cat is None:
            raise ParseError(f"rating value {raw!r} is not in the rating map")
        by_user.setdefault(user, {})[n] = cat

    users = sorted(u for u, items in by_user.items() if len(items) >= spec.min_rated_items)
    y = np.zeros((len(selected), len(users)), dtype=np.int32)
    for t, user in enumerate(users):
        for n, cat in by_user[user].items():
            y[n, t] = cat
    cards = (len(spec.rating_map),) * len(selected)
    return Dataset(cards=cards, y=y)


def _partition_sizes(total: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = int(round(spec.train_fraction * total))
    n_val = int(round(spec.validation_fraction * total))
    n_train = min(n_train, total)
    n_val = min(n_val, total - n_train)
    return n_train, n_val, total - n_train - n_val


def split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition the observed entries (or whole columns) into three splits.

    ``per_rating``: each observed cell lands in exactly one split; all
    three outputs keep the original shape with non-member cells set to 0.
    ``per_column``: whole columns are assigned; outputs hold their columns
    (in original order) so column counts differ.
    """
    g = rng.substream(spec.seed, rng.SPLIT)
    if spec.split_unit == "per_rating":
        obs_n, obs_t = np.nonzero(data.y)
        total = obs_n.size
        n_train, n_val, n_test = _partition_sizes(total, spec)
        _warn_empty(spec, n_train, n_val, n_test)
        perm = g.permutation(total)
        pieces = []
        for sel in (
            perm[:n_train],
            perm[n_train : n_train + n_val],
            perm[n_train + n_val :],
        ):
            y = np.zeros_like(data.y)
            y[obs_n[sel], obs_t[sel]] = data.y[obs_n[sel], obs_t[sel]]
            pieces.append(Dataset(cards=data.cards, y=y))
        return tuple(pieces)

    total = data.num_samples
    n_train, n_val, n_test = _partition_sizes(total, spec)
    _warn_empty(spec, n_train, n_val, n_test)
    perm = g.permutation(total)
    pieces = []
    for sel in (
        perm[:n_train],
        perm[n_train : n_train + n_val],
        perm[n_train + n_val :],
    ):
        cols = np.sort(sel)
        pieces.append(Dataset(cards=data.cards, y=data.y[:, cols]))
    return tuple(pieces)


def _warn_empty(spec: SplitSpec, n_train: int, n_val: int, n_test: int) -> None:
    for name, frac, count in (
        ("train", spec.train_fraction, n_train),
        ("validation", spec.validation_fraction, n_val),
        ("test", spec.test_fraction, n_test),
    ):
        if frac > 0.0 and count == 0:
            warnings.warn(f"{name} split is empty despite fraction {frac}")


def _observed_count(data: Dataset) -> int:
    return int(np.count_nonzero(data.y))


def split_manifest(spec: SplitSpec, train: Dataset, validation: Dataset, test: Dataset) -> dict:
    """Audit record of a split: seed, fractions, and per-split counts."""
    return {
        "seed": spec.seed,
        "split_unit": spec.split_unit,
        "fractions": {
            "train": spec.train_fraction,
            "validation": spec.validation_fraction,
            "test": spec.test_fraction,
        },
        "observed_cells": {
            "train": _observed_count(train),
            "validation": _observed_count(validation),
            "test": _observed_count(test),
        },
    }


def hide_one(test: Dataset, seed: int) -> tuple[list[tuple[int, int, int]], int]:
    """Pick one observed entry per usable test column to hide and predict.

    Returns (triples, skipped) where each triple is (column, variable,
    true category) and ``skipped`` counts columns with fewer than two
    observed entries (which leave no context to condition on).
    """
    g = rng.substream(seed, rng.HIDE)
    triples: list[tuple[int, int, int]] = []
    skipped = 0
    for t in range(test.num_samples):
        obs = np.flatnonzero(test.y[:, t] > 0)
        if obs.size < 2:
            skipped += 1
            continue
        n = int(obs[g.integers(obs.size)])
        triples.append((t, n, int(test.y[n, t])))
    return triples, skipped
