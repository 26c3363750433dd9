"""Deterministic coordinate-ascent variational fitting with rank pruning.

One sweep updates the local responsibilities from the current expected-log
parameters, refits the global Dirichlet parameters from the
responsibilities, and evaluates the evidence lower bound (ELBO).  Sweeps
repeat until the relative ELBO change falls below tolerance.  A
sparsity-promoting prior on the loading vector drives surplus components'
weights toward zero, so the model order is read off by pruning small
components once after convergence.

``update_local`` is a pure map over sample columns against read-only
state; global updates are deterministic reductions over columns.  The fit
loop itself is single-threaded orchestration, so results are
bit-reproducible for a given seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng, special
from .model import CpdModel, Dataset

__all__ = [
    "ConfigError",
    "FitConfig",
    "VariationalState",
    "LocalResponsibilities",
    "FitResult",
    "initial_state",
    "refresh_expected_logs",
    "update_local",
    "update_global_lambda",
    "update_global_factors",
    "compute_elbo",
    "point_estimates",
    "prune",
    "vb_fit",
]


class ConfigError(ValueError):
    """Fit rejected because the data/configuration combination is unusable."""


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters and stopping rules for the coordinate-ascent fit.

    Attributes:
        init_rank: number of components the fit starts with (pruned later).
        alpha_lambda: symmetric Dirichlet concentration of the loading
            prior; values << 1 promote sparse loadings and hence rank
            detection.
        alpha_factor: symmetric concentration of every factor-column prior.
        prune_eps: components with estimated weight below this are removed
            after convergence.
        elbo_tol: stop when the absolute change between successive sweep
            ELBO values falls below this.  Surplus components decay through
            long plateaus whose per-sweep ELBO drift is far above this
            scale, so the rule only fires once the iteration is essentially
            at a fixed point, where all prunable components have died.  (A
            tolerance relative to |ELBO|, which grows with the dataset,
            stops mid-plateau and leaves half-dead components above the
            pruning threshold.)  The held-out NLL mode instead treats this
            as a relative per-check change, since the per-sample NLL scale
            does not grow with the dataset.
        max_iters: sweep cap.
        seed: drives the variational-state initialization stream (and the
            held-out split, when used).
        holdout_fraction: columns reserved for the held-out convergence
            check; only consulted when convergence == "heldout_nll".
        convergence: "elbo" (default) or "heldout_nll" for large datasets
            where evaluating the full ELBO every sweep is too expensive.
    """

    init_rank: int
    alpha_lambda: float = 1e-6
    alpha_factor: float = 1.0
    prune_eps: float = 1e-3
    elbo_tol: float = 1e-7
    max_iters: int = 2000
    seed: int = 0
    holdout_fraction: float = 0.0
    convergence: str = "elbo"

    def __post_init__(self):
        if self.init_rank < 1:
            raise ValueError("init_rank must be >= 1")
        if self.alpha_lambda <= 0.0 or self.alpha_factor <= 0.0:
            raise ValueError("prior concentrations must be positive")
        if not 0.0 < self.prune_eps < 1.0:
            raise ValueError("prune_eps must lie in (0, 1)")
        if self.elbo_tol <= 0.0:
            raise ValueError("elbo_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if self.convergence not in ("elbo", "heldout_nll"):
            raise ValueError("convergence must be 'elbo' or 'heldout_nll'")


@dataclass(frozen=True)
class VariationalState:
    """Global Dirichlet variational parameters plus expected-log caches.

    ``alpha_loading`` has one entry per component; ``alpha_factors[n]`` is
    an (I_n, R) matrix whose column r parametrizes the posterior of factor
    column (n, r).  The caches hold the corresponding Dirichlet expected
    logs and are only populated by ``refresh_expected_logs``.
    """

    alpha_loading: np.ndarray
    alpha_factors: tuple[np.ndarray, ...]
    log_loading: np.ndarray | None = None
    log_factors: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        al = np.asarray(self.alpha_loading, dtype=np.float64)
        if al.ndim != 1 or al.size < 1 or np.any(al <= 0.0) or not np.all(np.isfinite(al)):
            raise ValueError("alpha_loading must be strictly positive")
        af = tuple(np.asarray(f, dtype=np.float64) for f in self.alpha_factors)
        for n, f in enumerate(af):
            if f.ndim != 2 or f.shape[1] != al.size:
                raise ValueError(f"alpha_factors[{n}] must have {al.size} columns")
            if np.any(f <= 0.0) or not np.all(np.isfinite(f)):
                raise ValueError(f"alpha_factors[{n}] must be strictly positive")
        object.__setattr__(self, "alpha_loading", al)
        object.__setattr__(self, "alpha_factors", af)

    @property
    def rank(self) -> int:
        return self.alpha_loading.size

    @property
    def caches_fresh(self) -> bool:
        return self.log_loading is not None and self.log_factors is not None


@dataclass(frozen=True)
class LocalResponsibilities:
    """Posterior component memberships, one column per sample."""

    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float64)
        if rho.ndim != 2:
            raise ValueError("rho must be a matrix (components x samples)")
        if rho.size:
            if np.any(rho < 0.0) or np.any(rho > 1.0):
                raise ValueError("rho entries must lie in [0, 1]")
            colsums = rho.sum(axis=0)
            if np.max(np.abs(colsums - 1.0)) > 1e-12:
                raise ValueError("each rho column must sum to 1 within 1e-12")
            if abs(float(rho.sum()) - rho.shape[1]) > 1e-9:
                raise ValueError("total responsibility must equal the column count")
        object.__setattr__(self, "rho", rho)

    @property
    def num_columns(self) -> int:
        return self.rho.shape[1]


@dataclass
class FitResult:
    """Outcome of a fit: pruned point-estimate model plus diagnostics."""

    model: CpdModel
    detected_rank: int
    iterations: int
    converged: bool
    elbo_trace: list[float] = field(default_factory=list)
    heldout_nll_trace: list[float] = field(default_factory=list)
    learning_rate_trace: list[float] = field(default_factory=list)
    batch_size: int | None = None

    def metrics_dict(self) -> dict:
        out = {
            "detected_rank": self.detected_rank,
            "iterations": self.iterations,
            "converged": self.converged,
        }
        if self.elbo_trace:
            out["elbo_trace"] = list(self.elbo_trace)
        if self.heldout_nll_trace:
            out["heldout_nll_trace"] = list(self.heldout_nll_trace)
        if self.learning_rate_trace:
            out["learning_rate_trace"] = list(self.learning_rate_trace)
        if self.batch_size is not None:
            out["batch_size"] = self.batch_size
        return out


# Initialization shape: geometric decay of the starting loading masses and
# uniform jitter on the factor concentrations.  The mass hierarchy is a
# global tie-breaker: when several components could claim the same cluster,
# the highest-priority one wins across most of its samples at once, so
# surplus components starve early (while their concentrations are small and
# decay is fast) instead of splitting clusters and lingering.
_INIT_LOADING_DECAY = 0.7
_INIT_FACTOR_SPREAD = 1.0


def initial_state(data: Dataset, config: FitConfig) -> VariationalState:
    """Random start with hierarchically ordered component masses.

    Loading concentrations begin at prior + T * w_r * u with geometrically
    decaying weights w and jitter u ~ U(0.9, 1.1); factor concentrations at
    prior + U(0, 1).  Raises ConfigError if some variable is never observed
    (its posterior would equal the prior).
    """
    g = rng.substream(config.seed, rng.INIT)
    r0 = config.init_rank
    t = data.num_samples
    weights = _INIT_LOADING_DECAY ** np.arange(r0)
    weights /= weights.sum()
    alpha_loading = config.alpha_lambda + t * weights * g.uniform(0.9, 1.1, size=r0)
    if t == 0:
        alpha_loading = config.alpha_lambda + g.uniform(0.9, 1.1, size=r0)
    factors = []
    for n, c in enumerate(data.cards):
        t_obs = int(np.count_nonzero(data.y[n]))
        if t_obs == 0 and t > 0:
            raise ConfigError(f"variable {n} is never observed; cannot be fit")
        factors.append(
            config.alpha_factor
            + _INIT_FACTOR_SPREAD * g.uniform(0.0, 1.0, size=(c, r0))
        )
    return VariationalState(alpha_loading=alpha_loading, alpha_factors=tuple(factors))


def refresh_expected_logs(state: VariationalState) -> VariationalState:
    """Recompute the expected-log caches from the concentrations."""
    log_loading = special.dirichlet_expect_log(state.alpha_loading)
    log_factors = []
    for f in state.alpha_factors:
        log_factors.append(special.digamma(f) - special.digamma(f.sum(axis=0))[None, :])
    return replace(state, log_loading=log_loading, log_factors=tuple(log_factors))


def _log_gamma_matrix(state: VariationalState, data: Dataset, columns=None) -> np.ndarray:
    """Unnormalized log-responsibilities: expected log-loading plus the
    expected log factor entry of every observed variable, per column.

    Returned with shape (R, ncols); the underlying buffer is samples-major
    so that per-sample gathers stay contiguous.
    """
    if not state.caches_fresh:
        raise ValueError("expected-log caches are stale; call refresh_expected_logs")
    y = data.y if columns is None else data.y[:, columns]
    ncols = y.shape[1]
    lg = np.tile(state.log_loading, (ncols, 1))  # (ncols, R)
    for n in range(data.num_vars):
        row = y[n]
        log_f = state.log_factors[n]
        if row.size and row.min() > 0:
            lg += log_f[row - 1]
        else:
            obs = np.flatnonzero(row > 0)
            if obs.size:
                lg[obs] += log_f[row[obs] - 1]
    return lg.T


def _responsibilities(log_gamma: np.ndarray) -> LocalResponsibilities:
    p = log_gamma.T  # (ncols, R), contiguous when from _log_gamma_matrix
    m = p.max(axis=1, keepdims=True)
    q = np.exp(p - m)
    q /= q.sum(axis=1, keepdims=True)
    # Softmax output satisfies the column-sum invariants by construction;
    # skip the validating constructor in this hot path.
    local = object.__new__(LocalResponsibilities)
    object.__setattr__(local, "rho", q.T)
    return local


def update_local(state: VariationalState, data: Dataset, columns=None) -> LocalResponsibilities:
    """Optimal responsibilities given the current global parameters.

    Missing entries contribute no factor.  ``columns`` restricts the
    computation to a subset of sample columns (used for minibatches).
    """
    return _responsibilities(_log_gamma_matrix(state, data, columns))


def update_global_lambda(config: FitConfig, local: LocalResponsibilities) -> np.ndarray:
    """Loading-block concentrations: prior plus per-component evidence."""
    rho = local.rho if isinstance(local, LocalResponsibilities) else np.asarray(local)
    return config.alpha_lambda + rho.sum(axis=1)


def _scatter_factor_sums(rho: np.ndarray, y: np.ndarray, cards, columns=None) -> list[np.ndarray]:
    """Per variable: (I_n, R) sums of responsibilities over the columns
    where the variable was observed with each category."""
    yv = y if columns is None else y[:, columns]
    rho_t = np.ascontiguousarray(rho.T)  # (ncols, R); no-op for fit-loop rho
    out = []
    for n, c in enumerate(cards):
        row = yv[n]
        acc = np.zeros((c, rho.shape[0]))
        for i in range(c):
            sel = row == i + 1
            if sel.any():
                acc[i] = rho_t[sel].sum(axis=0)
        out.append(acc)
    return out


def update_global_factors(
    config: FitConfig, local: LocalResponsibilities, data: Dataset, columns=None
) -> tuple[np.ndarray, ...]:
    """Factor-block concentrations: prior plus responsibility mass routed
    to each observed category.  Unobserved entries contribute nothing."""
    rho = local.rho if isinstance(local, LocalResponsibilities) else np.asarray(local)
    sums = _scatter_factor_sums(rho, data.y, data.cards, columns)
    return tuple(config.alpha_factor + s for s in sums)


def _block_log_norms(alpha_block: np.ndarray) -> np.ndarray:
    """Column-wise log Dirichlet normalization constants of an (I, R) block."""
    return special.log_gamma(alpha_block.sum(axis=0)) - special.log_gamma(alpha_block).sum(axis=0)


def _dirichlet_elbo_terms(config: FitConfig, state: VariationalState) -> float:
    """ELBO terms that depend only on the global state: expected log prior
    densities minus the negative entropies of the global posteriors."""
    r = state.rank
    prior_loading = special.log_dirichlet_norm(
        np.full(r, config.alpha_lambda)
    ) + (config.alpha_lambda - 1.0) * float(state.log_loading.sum())
    q_loading = special.log_dirichlet_norm(state.alpha_loading) + float(
        ((state.alpha_loading - 1.0) * state.log_loading).sum()
    )
    prior_factors = 0.0
    q_factors = 0.0
    for n, alpha in enumerate(state.alpha_factors):
        log_f = state.log_factors[n]
        prior_norm = special.log_dirichlet_norm(np.full(alpha.shape[0], config.alpha_factor))
        prior_factors += r * prior_norm + (config.alpha_factor - 1.0) * float(log_f.sum())
        q_factors += float(_block_log_norms(alpha).sum()) + float(
            ((alpha - 1.0) * log_f).sum()
        )
    return prior_loading + prior_factors - q_loading - q_factors


def compute_elbo(
    config: FitConfig,
    state: VariationalState,
    local: LocalResponsibilities,
    data: Dataset,
    log_gamma: np.ndarray | None = None,
) -> float:
    """Closed-form evidence lower bound for the given (state, rho) pair.

    The data term is restricted to observed entries and 0*log(0) in the
    responsibility entropy is taken as 0.  ``log_gamma`` may pass in the
    matrix from ``_log_gamma_matrix(state, data)`` to avoid recomputing it.
    """
    if not state.caches_fresh:
        raise ValueError("expected-log caches are stale; call refresh_expected_logs")
    rho = local.rho if isinstance(local, LocalResponsibilities) else np.asarray(local)
    if log_gamma is None:
        log_gamma = _log_gamma_matrix(state, data)

    data_term = float(np.einsum("rt,rt->", rho, log_gamma))
    safe = np.where(rho > 0.0, rho, 1.0)
    entropy = -float(np.einsum("rt,rt->", rho, np.log(safe)))
    return data_term + entropy + _dirichlet_elbo_terms(config, state)


def point_estimates(state: VariationalState) -> CpdModel:
    """Posterior-mean loading and factor columns as a CpdModel."""
    loading = state.alpha_loading / state.alpha_loading.sum()
    factors = tuple(f / f.sum(axis=0, keepdims=True) for f in state.alpha_factors)
    cards = tuple(f.shape[0] for f in factors)
    return CpdModel(cards=cards, loading=loading, factors=factors)


def prune(model: CpdModel, eps: float) -> tuple[CpdModel, int]:
    """Drop components with weight strictly below ``eps`` and renormalize.

    Weights exactly equal to eps survive.  If every component falls below
    the threshold the single largest one is kept.
    """
    keep = np.flatnonzero(model.loading >= eps)
    if keep.size == 0:
        keep = np.array([int(np.argmax(model.loading))])
    loading = model.loading[keep]
    loading = loading / loading.sum()
    factors = tuple(f[:, keep] for f in model.factors)
    pruned = CpdModel(cards=model.cards, loading=loading, factors=factors)
    return pruned, int(keep.size)


def _heldout_split(data: Dataset, config: FitConfig) -> tuple[Dataset, Dataset]:
    """Reserve a seeded fraction of columns for convergence checks."""
    t = data.num_samples
    n_hold = max(1, int(round(config.holdout_fraction * t)))
    if n_hold >= t:
        raise ConfigError("holdout_fraction leaves no training columns")
    perm = rng.substream(config.seed, rng.HOLDOUT).permutation(t)
    hold = np.sort(perm[:n_hold])
    train = np.sort(perm[n_hold:])
    return (
        Dataset(cards=data.cards, y=data.y[:, train]),
        Dataset(cards=data.cards, y=data.y[:, hold]),
    )


def vb_fit(data: Dataset, config: FitConfig, engine: str = "auto") -> FitResult:
    """Coordinate-ascent fit: alternate local and global updates until the
    ELBO (or, optionally, a held-out NLL) converges, then prune.

    The ELBO is evaluated once per sweep, after the global updates, using
    the responsibilities computed earlier in that sweep; at those sweep
    boundaries the trace is guaranteed non-decreasing up to float error.

    ``engine`` selects "fused" (single-pass compiled sweep, default when
    numba is importable) or "reference" (pure-numpy updates); both follow
    the same update equations and agree to float accumulation order.
    """
    if config.init_rank < 1:
        raise ValueError("init_rank must be >= 1")
    if engine not in ("auto", "fused", "reference"):
        raise ValueError("engine must be 'auto', 'fused', or 'reference'")
    heldout = None
    train = data
    if config.convergence == "heldout_nll":
        if config.holdout_fraction <= 0.0:
            raise ConfigError("heldout_nll convergence requires holdout_fraction > 0")
        train, heldout = _heldout_split(data, config)

    from . import _kernels

    if engine == "auto":
        engine = "fused" if _kernels.HAVE_NUMBA else "reference"
    runner = _fit_loop_fused if engine == "fused" else _fit_loop_reference
    state, elbo_trace, nll_trace, iterations, converged = runner(
        train, heldout, config
    )
    model, detected = prune(point_estimates(state), config.prune_eps)
    return FitResult(
        model=model,
        detected_rank=detected,
        iterations=iterations,
        converged=converged,
        elbo_trace=elbo_trace,
        heldout_nll_trace=nll_trace,
    )


def _check_convergence(config, heldout, state, elbo_parts, elbo_trace, nll_trace, k):
    from . import evaluate  # deferred: evaluate imports model only

    if heldout is None:
        elbo = elbo_parts() + _dirichlet_elbo_terms(config, state)
        elbo_trace.append(elbo)
        return k >= 2 and abs(elbo - elbo_trace[-2]) < config.elbo_tol
    nll = evaluate.mean_nll(point_estimates(state), heldout)
    nll_trace.append(nll)
    if k >= 2:
        prev = nll_trace[-2]
        return abs(nll - prev) < config.elbo_tol * max(abs(prev), 1e-300)
    return False


def _fit_loop_reference(train: Dataset, heldout, config: FitConfig):
    state = refresh_expected_logs(initial_state(train, config))
    log_gamma = _log_gamma_matrix(state, train)
    local = _responsibilities(log_gamma)

    elbo_trace: list[float] = []
    nll_trace: list[float] = []
    converged = False
    iterations = 0
    for k in range(1, config.max_iters + 1):
        iterations = k
        state = refresh_expected_logs(
            VariationalState(
                alpha_loading=update_global_lambda(config, local),
                alpha_factors=update_global_factors(config, local, train),
            )
        )
        log_gamma = _log_gamma_matrix(state, train)

        def elbo_parts(local=local, lg=log_gamma):
            data_term = float(np.einsum("rt,rt->", local.rho, lg))
            safe = np.where(local.rho > 0.0, local.rho, 1.0)
            return data_term - float(np.einsum("rt,rt->", local.rho, np.log(safe)))

        if _check_convergence(config, heldout, state, elbo_parts, elbo_trace, nll_trace, k):
            converged = True
            break
        local = _responsibilities(log_gamma)
    return state, elbo_trace, nll_trace, iterations, converged


def _fit_loop_fused(train: Dataset, heldout, config: FitConfig):
    from ._kernels import fused_sweep

    offsets = np.zeros(train.num_vars + 1, dtype=np.int64)
    np.cumsum(train.cards, out=offsets[1:])
    y = np.ascontiguousarray(train.y)

    state = refresh_expected_logs(initial_state(train, config))
    rho_t = np.zeros((train.num_samples, config.init_rank))
    # Initialization pass: all-zero incoming responsibilities contribute
    # nothing to the (discarded) ELBO terms; the pass fills rho and the
    # sufficient statistics of the first global update.
    sum_loading, scatter, _, _ = fused_sweep(
        y, state.log_loading, np.vstack(state.log_factors), offsets[:-1], rho_t
    )

    elbo_trace: list[float] = []
    nll_trace: list[float] = []
    converged = False
    iterations = 0
    for k in range(1, config.max_iters + 1):
        iterations = k
        state = refresh_expected_logs(
            VariationalState(
                alpha_loading=config.alpha_lambda + sum_loading,
                alpha_factors=tuple(
                    config.alpha_factor + scatter[offsets[n] : offsets[n + 1]]
                    for n in range(train.num_vars)
                ),
            )
        )
        sum_loading, scatter, data_term, entropy = fused_sweep(
            y, state.log_loading, np.vstack(state.log_factors), offsets[:-1], rho_t
        )
        if _check_convergence(
            config, heldout, state,
            lambda: data_term + entropy, elbo_trace, nll_trace, k,
        ):
            converged = True
            break
    return state, elbo_trace, nll_trace, iterations, converged
