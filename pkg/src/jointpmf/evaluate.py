"""Accuracy metrics and conditional-expectation prediction.

KLD between two factored PMFs is computed by exact streaming enumeration
of the joint tensor (never by sampling), so it is only offered up to a
configurable cell cap.  All operations are pure.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import CpdModel, Dataset

__all__ = [
    "MetricReport",
    "kld_full",
    "mean_nll",
    "predict_entry",
    "rmse_mae",
]

DEFAULT_CELL_CAP = 10_000_000
_CHUNK_CELLS = 65_536


@dataclass
class MetricReport:
    """Bundle of evaluation metrics; fields not computed stay None."""

    kld: float | None = None
    mean_nll: float | None = None
    rmse: float | None = None
    mae: float | None = None
    n_predictions: int = 0

    def to_dict(self) -> dict:
        return {
            "kld": self.kld,
            "mean_nll": self.mean_nll,
            "rmse": self.rmse,
            "mae": self.mae,
            "n_predictions": self.n_predictions,
        }


def _tail_khatri_rao(model: CpdModel, start: int) -> np.ndarray:
    """Row-wise product over modes start..N-1: (prod I, R) matrix whose
    row for a joint tail index holds the per-component factor products."""
    out = np.ones((1, model.rank))
    for n in range(start, model.num_vars):
        f = model.factors[n]
        out = (out[:, None, :] * f[None, :, :]).reshape(-1, model.rank)
    return out


def _split_point(cards, cap: int) -> int:
    """First mode index whose tail cell count fits the chunk budget."""
    k = len(cards)
    tail = 1
    while k > 0 and tail * cards[k - 1] <= cap:
        tail *= cards[k - 1]
        k -= 1
    return k


def kld_full(truth: CpdModel, estimate: CpdModel, cell_cap: int = DEFAULT_CELL_CAP) -> float:
    """Exact KL divergence between the two materialized PMF tensors.

    Enumerates cells in chunks, accumulating sum(X * log(X / X_hat)) with
    0 * log(0 / anything) = 0.  A zero estimate cell under positive truth
    yields +inf with a diagnostic warning.  Tensors larger than
    ``cell_cap`` cells are refused.
    """
    if truth.cards != estimate.cards:
        raise ValueError("models must share variable count and cardinalities")
    cells = math.prod(truth.cards)
    if cells > cell_cap:
        raise ValueError(
            f"tensor has {cells} cells, above the enumeration cap {cell_cap}; "
            "raise cell_cap explicitly if enumeration is really intended"
        )
    k = _split_point(truth.cards, _CHUNK_CELLS)
    kr_truth = _tail_khatri_rao(truth, k)
    kr_est = _tail_khatri_rao(estimate, k)
    partials = []
    zero_cells = 0
    for prefix in np.ndindex(*truth.cards[:k]):
        w_t = truth.loading.copy()
        w_e = estimate.loading.copy()
        for n, i in enumerate(prefix):
            w_t *= truth.factors[n][i]
            w_e *= estimate.factors[n][i]
        x = kr_truth @ w_t
        x_hat = kr_est @ w_e
        bad = (x > 0.0) & (x_hat <= 0.0)
        if bad.any():
            zero_cells += int(bad.sum())
            continue
        pos = x > 0.0
        if pos.any():
            xp = x[pos]
            partials.append(float((xp * (np.log(xp) - np.log(x_hat[pos]))).sum()))
    if zero_cells:
        warnings.warn(
            f"estimate assigns zero probability to {zero_cells} cells with "
            "positive truth; KLD is +inf"
        )
        return math.inf
    return float(math.fsum(partials))


def mean_nll(model: CpdModel, data: Dataset) -> float:
    """Mean per-sample negative log-likelihood over the dataset.

    Columns with no observed entries contribute exactly 0.  A sample with
    zero probability under the model yields +inf with a diagnostic.
    """
    t = data.num_samples
    if t < 1:
        raise ValueError("mean_nll requires at least one sample")
    y = data.y
    obs_any = (y > 0).any(axis=0)
    loglik = np.zeros(t)
    if obs_any.any():
        cols = np.flatnonzero(obs_any)
        w = np.repeat(model.loading[:, None], cols.size, axis=1)
        for n in range(data.num_vars):
            row = y[n, cols]
            sel = row > 0
            if sel.any():
                w[:, sel] *= model.factors[n][row[sel] - 1].T
        p = w.sum(axis=0)
        if np.any(p <= 0.0):
            warnings.warn(
                f"{int((p <= 0.0).sum())} samples have probability 0 under the "
                "model; mean NLL is +inf"
            )
            return math.inf
        loglik[cols] = np.log(p)
    return float(-loglik.mean())


def predict_entry(model: CpdModel, y, target: int) -> float:
    """Conditional expectation of variable ``target`` given the other
    observed entries of ``y`` (whose entry for ``target`` is ignored).

    If the observed context has probability zero under the model, falls
    back to the unconditional marginal mean of the target variable, with a
    warning.
    """
    yv = np.asarray(y, dtype=np.int64)
    if yv.shape != (model.num_vars,):
        raise ValueError(f"sample must have length {model.num_vars}")
    if not 0 <= target < model.num_vars:
        raise ValueError(f"target must index a variable, got {target}")
    for n, c in enumerate(yv):
        if n != target and not 0 <= c <= model.cards[n]:
            raise ValueError(f"value {c} out of range 0..{model.cards[n]} for variable {n}")
    w = model.loading.copy()
    for n, c in enumerate(yv):
        if n != target and c > 0:
            w *= model.factors[n][c - 1]
    scores = model.factors[target] @ w
    total = float(scores.sum())
    if total <= 0.0:
        warnings.warn(
            f"observed context has probability 0; falling back to the "
            f"marginal mean of variable {target}"
        )
        scores = model.factors[target] @ model.loading
        total = float(scores.sum())
    probs = scores / total
    categories = np.arange(1, model.cards[target] + 1, dtype=np.float64)
    return float(categories @ probs)


def rmse_mae(predictions, truths) -> tuple[float, float]:
    """Root-mean-square and mean absolute error between two equal-length
    sequences."""
    pred = np.asarray(predictions, dtype=np.float64)
    true = np.asarray(truths, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size < 1:
        raise ValueError("predictions and truths must be equal-length, non-empty vectors")
    err = pred - true
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    return rmse, mae
