"""Minibatch stochastic variational fitting with adaptive learning rates.

Each step samples a minibatch, computes responsibilities for those columns
only, forms noisy natural gradients (the minibatch-scaled coordinate
targets minus the current parameters), and moves each parameter block a
fraction of the way toward its target.  The step size per block is either
the variance-based adaptive rate (ratio of squared-mean to mean-square of
recent gradients, estimated by exponential moving averages) or an optional
Robbins-Monro schedule.  Convergence is judged on the mean NLL of held-out
columns.

Per-sample gradient computation is a pure map over the minibatch against
read-only global state; averaging uses deterministic numpy reductions, and
optimizer-state mutation happens only in the single orchestrating loop.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluate, rng
from .model import Dataset
from .vb import (
    ConfigError,
    FitConfig,
    FitResult,
    LocalResponsibilities,
    VariationalState,
    _scatter_factor_sums,
    initial_state,
    point_estimates,
    prune,
    refresh_expected_logs,
    update_local,
)

__all__ = [
    "SviConfig",
    "SviState",
    "sample_minibatch",
    "noisy_natural_gradient_lambda",
    "noisy_natural_gradient_factors",
    "adaptive_learning_rate",
    "svi_step",
    "svb_fit",
    "holdout_split",
]

_XI_FLOOR = 1e-12


@dataclass(frozen=True)
class SviConfig(FitConfig):
    """FitConfig plus minibatch and learning-rate machinery.

    ``batch_size`` defaults to ceil(sqrt(T)) at fit time when left None.
    ``lr_schedule`` selects "adaptive" (default, no hand-tuning) or
    "robbins_monro" with rate (k + rm_tau) ** -rm_kappa.
    """

    batch_size: int | None = None
    max_runtime: float | None = None
    lr_ema_decay: float = 0.9
    nll_check_interval: int = 50
    lr_schedule: str = "adaptive"
    rm_tau: float = 1.0
    rm_kappa: float = 0.75

    def __post_init__(self):
        super().__post_init__()
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.lr_ema_decay < 1.0:
            raise ValueError("lr_ema_decay must lie in (0, 1)")
        if self.nll_check_interval < 1:
            raise ValueError("nll_check_interval must be >= 1")
        if self.lr_schedule not in ("adaptive", "robbins_monro"):
            raise ValueError("lr_schedule must be 'adaptive' or 'robbins_monro'")
        if self.rm_tau < 0.0 or not 0.5 < self.rm_kappa <= 1.0:
            raise ValueError("need rm_tau >= 0 and rm_kappa in (0.5, 1]")


@dataclass
class SviState:
    """Variational state plus stochastic-optimizer bookkeeping.

    Gradient EMAs hold the recent minibatch-mean gradients per block (one
    loading block, one block per factor column); squared-norm EMAs hold
    the corresponding mean squared norms.  Both are seeded from the first
    step's gradients, which makes the first learning rate exactly 1.
    """

    variational: VariationalState
    iteration: int = 0
    g_ema_loading: np.ndarray | None = None
    h_ema_loading: float = 0.0
    g_ema_factors: list[np.ndarray] = field(default_factory=list)
    h_ema_factors: list[np.ndarray] = field(default_factory=list)
    xi_loading: float = 1.0
    xi_factors: list[np.ndarray] = field(default_factory=list)


def sample_minibatch(data: Dataset, batch_size: int, gen: np.random.Generator) -> np.ndarray:
    """Draw ``batch_size`` column indices i.i.d. uniform, with replacement.

    Indices are 0-based.  The draw is deterministic given the generator's
    stream position.
    """
    t = data.num_samples
    if t < 1:
        raise ValueError("cannot sample a minibatch from an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return gen.integers(0, t, size=batch_size)


def noisy_natural_gradient_lambda(
    config: FitConfig, state: VariationalState, local, num_samples: int
) -> np.ndarray:
    """Per-sample noisy natural gradients for the loading block, (M, R).

    Sample m contributes prior + T * rho[:, m] - alpha_loading: the
    coordinate target, as if the sample were replicated T times, minus the
    current parameter.  Averaging over uniformly drawn samples gives an
    unbiased estimate of the full natural gradient.
    """
    rho = local.rho if isinstance(local, LocalResponsibilities) else np.asarray(local)
    return config.alpha_lambda + num_samples * rho.T - state.alpha_loading[None, :]


def noisy_natural_gradient_factors(
    config: FitConfig,
    state: VariationalState,
    local,
    batch_observations: np.ndarray,
    num_samples: int,
) -> tuple[np.ndarray, ...]:
    """Per-sample factor-block gradients, one (M, I_n, R) array per variable.

    The T-scaled responsibility lands on the observed category only; for a
    missing entry the indicator never fires, leaving prior - current.
    """
    rho = local.rho if isinstance(local, LocalResponsibilities) else np.asarray(local)
    m = rho.shape[1]
    out = []
    for n, alpha in enumerate(state.alpha_factors):
        g = np.broadcast_to(
            config.alpha_factor - alpha[None, :, :], (m, *alpha.shape)
        ).copy()
        row = batch_observations[n]
        obs = np.flatnonzero(row > 0)
        if obs.size:
            g[obs, row[obs] - 1, :] += num_samples * rho[:, obs].T
        out.append(g)
    return tuple(out)


def adaptive_learning_rate(g_ema: np.ndarray, h_ema: float) -> float:
    """Step size from gradient EMAs: (g.g) / h, clamped into (0, 1].

    A zero mean-square (noise-free start) is treated as rate 1.
    """
    if h_ema <= 0.0:
        return 1.0
    g = np.asarray(g_ema, dtype=np.float64)
    xi = float(g @ g) / float(h_ema)
    return float(min(max(xi, _XI_FLOOR), 1.0))


def _factor_rates(g_ema: np.ndarray, h_ema: np.ndarray) -> np.ndarray:
    """Column-wise adaptive rates for one variable's (I, R) gradient EMA."""
    num = np.einsum("ir,ir->r", g_ema, g_ema)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.where(h_ema > 0.0, num / h_ema, 1.0)
    return np.clip(xi, _XI_FLOOR, 1.0)


def svi_step(
    state: SviState,
    data: Dataset,
    config: SviConfig,
    indices: np.ndarray | None = None,
    gen: np.random.Generator | None = None,
) -> SviState:
    """One stochastic update of all global parameters (mutates ``state``).

    ``indices`` overrides minibatch sampling (used by the full-enumeration
    identity tests); otherwise ``gen`` supplies the minibatch stream.
    Every concentration stays strictly positive because the update is a
    convex combination of the current value and a positive target.
    """
    if indices is None:
        if gen is None:
            raise ValueError("either indices or a minibatch generator is required")
        batch = config.batch_size or _default_batch(data.num_samples)
        indices = sample_minibatch(data, batch, gen)
    indices = np.asarray(indices, dtype=np.int64)
    m = indices.size
    t = data.num_samples
    var = state.variational

    local = update_local(var, data, columns=indices)
    rho = local.rho

    # Minibatch-mean gradients, computed in aggregate (identical to the
    # mean of the per-sample forms).
    mean_g_loading = config.alpha_lambda + (t / m) * rho.sum(axis=1) - var.alpha_loading
    sums = _scatter_factor_sums(rho, data.y, data.cards, columns=indices)
    mean_g_factors = [
        config.alpha_factor + (t / m) * s - alpha
        for s, alpha in zip(sums, var.alpha_factors)
    ]

    k = state.iteration + 1
    if config.lr_schedule == "robbins_monro":
        xi = (k + config.rm_tau) ** (-config.rm_kappa)
        xi_loading = float(min(max(xi, _XI_FLOOR), 1.0))
        xi_factors = [np.full(var.rank, xi_loading) for _ in mean_g_factors]
    else:
        d = config.lr_ema_decay
        if state.g_ema_loading is None:
            state.g_ema_loading = mean_g_loading.copy()
            state.h_ema_loading = float(mean_g_loading @ mean_g_loading)
            state.g_ema_factors = [g.copy() for g in mean_g_factors]
            state.h_ema_factors = [
                np.einsum("ir,ir->r", g, g) for g in mean_g_factors
            ]
        else:
            state.g_ema_loading = d * state.g_ema_loading + (1.0 - d) * mean_g_loading
            state.h_ema_loading = d * state.h_ema_loading + (1.0 - d) * float(
                mean_g_loading @ mean_g_loading
            )
            for n, g in enumerate(mean_g_factors):
                state.g_ema_factors[n] = d * state.g_ema_factors[n] + (1.0 - d) * g
                state.h_ema_factors[n] = d * state.h_ema_factors[n] + (
                    1.0 - d
                ) * np.einsum("ir,ir->r", g, g)
        xi_loading = adaptive_learning_rate(state.g_ema_loading, state.h_ema_loading)
        xi_factors = [
            _factor_rates(g, h)
            for g, h in zip(state.g_ema_factors, state.h_ema_factors)
        ]

    new_loading = var.alpha_loading + xi_loading * mean_g_loading
    new_factors = tuple(
        alpha + xi[None, :] * g
        for alpha, xi, g in zip(var.alpha_factors, xi_factors, mean_g_factors)
    )
    state.variational = refresh_expected_logs(
        VariationalState(alpha_loading=new_loading, alpha_factors=new_factors)
    )
    state.iteration = k
    state.xi_loading = xi_loading
    state.xi_factors = xi_factors
    return state


def _default_batch(num_samples: int) -> int:
    return max(1, math.isqrt(num_samples - 1) + 1) if num_samples > 1 else 1


def holdout_split(data: Dataset, config: FitConfig) -> tuple[Dataset, Dataset]:
    """(train, heldout) column split used by ``svb_fit``, seeded from the
    config so callers can reconstruct the held-out set."""
    t = data.num_samples
    n_hold = max(1, int(round(config.holdout_fraction * t)))
    if n_hold >= t:
        raise ConfigError("holdout_fraction leaves no training columns")
    perm = rng.substream(config.seed, rng.HOLDOUT).permutation(t)
    hold = np.sort(perm[:n_hold])
    keep = np.sort(perm[n_hold:])
    return (
        Dataset(cards=data.cards, y=data.y[:, keep]),
        Dataset(cards=data.cards, y=data.y[:, hold]),
    )


def svb_fit(data: Dataset, config: SviConfig) -> FitResult:
    """Stochastic fit: iterate svi_step until the held-out NLL converges,
    the iteration cap is hit, or the runtime budget runs out; then prune.
    """
    if config.holdout_fraction <= 0.0:
        raise ConfigError("svb_fit requires holdout_fraction > 0 for convergence checks")
    train, heldout = holdout_split(data, config)
    for n in range(train.num_vars):
        if not np.any(train.y[n] > 0):
            raise ConfigError(f"variable {n} is never observed in the training columns")

    batch = config.batch_size or _default_batch(train.num_samples)
    if batch > train.num_samples:
        raise ConfigError("batch_size exceeds the number of training columns")

    state = SviState(variational=refresh_expected_logs(initial_state(train, config)))
    gen = rng.substream(config.seed, rng.MINIBATCH)

    nll_trace: list[float] = []
    xi_trace: list[float] = []
    converged = False
    started = time.monotonic()
    iterations = 0
    batch_config = config if config.batch_size else _with_batch(config, batch)

    for k in range(1, config.max_iters + 1):
        iterations = k
        svi_step(state, train, batch_config, gen=gen)
        xi_trace.append(state.xi_loading)
        if k % config.nll_check_interval == 0:
            nll = evaluate.mean_nll(point_estimates(state.variational), heldout)
            nll_trace.append(nll)
            if len(nll_trace) >= 2:
                prev = nll_trace[-2]
                if abs(nll - prev) < config.elbo_tol * max(abs(prev), 1e-300):
                    converged = True
                    break
        if config.max_runtime is not None and time.monotonic() - started > config.max_runtime:
            break

    model, detected = prune(point_estimates(state.variational), config.prune_eps)
    return FitResult(
        model=model,
        detected_rank=detected,
        iterations=iterations,
        converged=converged,
        heldout_nll_trace=nll_trace,
        learning_rate_trace=xi_trace,
        batch_size=batch,
    )


def _with_batch(config: SviConfig, batch: int) -> SviConfig:
    from dataclasses import replace

    return replace(config, batch_size=batch)
