"""Stochastic-update identity, unbiasedness, and convergence checks."""

import numpy as np
import pytest

from jointpmf import sample_dataset, sample_model
from jointpmf.rng import MINIBATCH, substream
from jointpmf.svi import (
    SviConfig,
    SviState,
    adaptive_learning_rate,
    holdout_split,
    noisy_natural_gradient_factors,
    noisy_natural_gradient_lambda,
    sample_minibatch,
    svb_fit,
    svi_step,
)
from jointpmf.vb import (
    ConfigError,
    VariationalState,
    initial_state,
    refresh_expected_logs,
    update_global_factors,
    update_global_lambda,
    update_local,
)


def problem(seed=3, t=40, p=0.3, cards=(3, 4, 2), rank=3):
    truth = sample_model(len(cards), cards, 2, seed=seed)
    data = sample_dataset(truth, t, p, seed=seed)
    config = SviConfig(
        init_rank=rank, alpha_lambda=0.2, alpha_factor=1.1,
        holdout_fraction=0.2, seed=seed,
    )
    state = refresh_expected_logs(initial_state(data, config))
    return data, config, state


class TestSampleMinibatch:
    def test_single_sample(self):
        data, config, _ = problem(t=1, p=0.0)
        idx = sample_minibatch(data, 1, substream(0, MINIBATCH))
        assert idx.tolist() == [0]

    def test_uniform_histogram(self):
        data, _, _ = problem(t=10)
        gen = substream(5, MINIBATCH)
        draws = sample_minibatch(data, 1_000_000, gen)
        counts = np.bincount(draws, minlength=10)
        p = 0.1
        sigma = np.sqrt(p * (1 - p) * draws.size)
        assert np.all(np.abs(counts - draws.size * p) <= 4 * sigma)

    def test_stream_position_determinism(self):
        data, _, _ = problem(t=20)
        a = sample_minibatch(data, 13, substream(9, MINIBATCH))
        b = sample_minibatch(data, 13, substream(9, MINIBATCH))
        assert np.array_equal(a, b)

    def test_empty_dataset(self):
        from jointpmf.model import Dataset

        empty = Dataset(cards=(2,), y=np.zeros((1, 0), dtype=np.int32))
        with pytest.raises(ValueError):
            sample_minibatch(empty, 1, substream(0, MINIBATCH))


class TestNoisyGradients:
    def test_full_enumeration_unbiasedness_lambda(self):
        data, config, state = problem(t=60)
        local = update_local(state, data)
        grads = noisy_natural_gradient_lambda(config, state, local, data.num_samples)
        mean_grad = grads.mean(axis=0)
        full = update_global_lambda(config, local) - state.alpha_loading
        np.testing.assert_allclose(mean_grad, full, atol=1e-10)

    def test_full_enumeration_unbiasedness_factors(self):
        data, config, state = problem(t=60, p=0.0)
        local = update_local(state, data)
        grads = noisy_natural_gradient_factors(
            config, state, local, data.y, data.num_samples
        )
        targets = update_global_factors(config, local, data)
        for n in range(data.num_vars):
            mean_grad = grads[n].mean(axis=0)
            full = targets[n] - state.alpha_factors[n]
            np.testing.assert_allclose(mean_grad, full, atol=1e-10)

    def test_fixed_point_gradient_is_zero(self):
        data, config, state = problem(t=50)
        local = update_local(state, data)
        st2 = refresh_expected_logs(
            VariationalState(
                alpha_loading=update_global_lambda(config, local),
                alpha_factors=update_global_factors(config, local, data),
            )
        )
        # Same rho, state at the coordinate-ascent target: zero mean gradient.
        grads = noisy_natural_gradient_lambda(config, st2, local, data.num_samples)
        np.testing.assert_allclose(grads.mean(axis=0), 0.0, atol=1e-10)

    def test_missing_sample_gradient_is_prior_minus_current(self):
        data, config, state = problem(t=5)
        y = np.zeros((data.num_vars, 2), dtype=np.int32)  # two all-missing samples
        local = update_local(state, data, columns=[0, 1])
        grads = noisy_natural_gradient_factors(config, state, local, y, data.num_samples)
        for n in range(data.num_vars):
            expect = config.alpha_factor - state.alpha_factors[n]
            np.testing.assert_allclose(grads[n][0], expect, atol=0)
            np.testing.assert_allclose(grads[n][1], expect, atol=0)

    def test_observed_indicator_is_one_hot(self):
        data, config, state = problem(t=10, p=0.0)
        idx = np.array([4])
        local = update_local(state, data, columns=idx)
        grads = noisy_natural_gradient_factors(
            config, state, local, data.y[:, idx], data.num_samples
        )
        for n in range(data.num_vars):
            lifted = grads[n][0] - (config.alpha_factor - state.alpha_factors[n])
            nonzero_rows = np.flatnonzero(np.abs(lifted).sum(axis=1) > 0)
            assert nonzero_rows.tolist() == [int(data.y[n, idx[0]] - 1)]


class TestAdaptiveLearningRate:
    def test_zero_variance_gives_one(self):
        g = np.array([2.0, -1.0])
        assert adaptive_learning_rate(g, float(g @ g)) == 1.0

    def test_direct_substitution(self):
        assert adaptive_learning_rate(np.array([1.0, 0.0]), 4.0) == 0.25

    def test_zero_h_treated_as_one(self):
        assert adaptive_learning_rate(np.zeros(3), 0.0) == 1.0

    def test_clamped_to_unit_interval(self):
        rng = np.random.default_rng(31)
        g_ema = None
        h_ema = 0.0
        d = 0.9
        for _ in range(200):
            g = rng.normal(0, 1, 4)
            if g_ema is None:
                g_ema, h_ema = g.copy(), float(g @ g)
            else:
                g_ema = d * g_ema + (1 - d) * g
                h_ema = d * h_ema + (1 - d) * float(g @ g)
            xi = adaptive_learning_rate(g_ema, h_ema)
            assert 0.0 < xi <= 1.0


class TestSviStep:
    def test_full_batch_first_step_is_coordinate_update(self):
        # Every sample exactly once and the first-step adaptive rate (=1)
        # must reproduce the deterministic coordinate update.
        data, config, state = problem(t=30)
        local = update_local(state, data)
        target_l = update_global_lambda(config, local)
        target_f = update_global_factors(config, local, data)

        svi_state = SviState(variational=state)
        svi_step(svi_state, data, config, indices=np.arange(data.num_samples))
        assert svi_state.xi_loading == 1.0
        np.testing.assert_allclose(
            svi_state.variational.alpha_loading, target_l, rtol=1e-12, atol=1e-12
        )
        for n in range(data.num_vars):
            np.testing.assert_allclose(
                svi_state.variational.alpha_factors[n], target_f[n],
                rtol=1e-12, atol=1e-12,
            )

    def test_positivity_over_many_steps(self):
        data, config, state = problem(t=80)
        svi_state = SviState(variational=state)
        gen = substream(config.seed, MINIBATCH)
        for _ in range(500):
            svi_step(svi_state, data, config, gen=gen)
            assert np.all(svi_state.variational.alpha_loading > 0)
            assert all(np.all(f > 0) for f in svi_state.variational.alpha_factors)
            assert 0.0 < svi_state.xi_loading <= 1.0

    def test_matches_straight_line_reimplementation(self):
        # Three steps against a literal loop-based transcription of the
        # stochastic update (per-sample gradients, EMA rates, block update).
        data, config, state = problem(t=25)
        m = 6
        gen = substream(41, MINIBATCH)
        batches = [sample_minibatch(data, m, gen) for _ in range(3)]

        svi_state = SviState(variational=state)
        for idx in batches:
            svi_step(svi_state, data, config, indices=idx)

        ref = _straight_line_svi(state, data, config, batches)
        np.testing.assert_allclose(
            svi_state.variational.alpha_loading, ref.alpha_loading, rtol=1e-9
        )
        for n in range(data.num_vars):
            np.testing.assert_allclose(
                svi_state.variational.alpha_factors[n], ref.alpha_factors[n], rtol=1e-9
            )

    def test_robbins_monro_schedule(self):
        data, config, state = problem(t=30)
        config = SviConfig(
            init_rank=config.init_rank, alpha_lambda=config.alpha_lambda,
            alpha_factor=config.alpha_factor, holdout_fraction=0.2,
            seed=config.seed, lr_schedule="robbins_monro", rm_tau=0.0, rm_kappa=1.0,
        )
        svi_state = SviState(variational=state)
        svi_step(svi_state, data, config, indices=np.arange(data.num_samples))
        assert svi_state.xi_loading == 1.0  # (1 + 0) ** -1
        svi_step(svi_state, data, config, indices=np.arange(data.num_samples))
        assert svi_state.xi_loading == 0.5  # (2 + 0) ** -1


def _straight_line_svi(state, data, config, batches):
    """Literal per-sample transcription of the stochastic update loop."""
    alpha_l = state.alpha_loading.copy()
    alpha_f = [f.copy() for f in state.alpha_factors]
    t = data.num_samples
    g_ema_l = h_ema_l = None
    g_ema_f = [None] * data.num_vars
    h_ema_f = [None] * data.num_vars
    d = config.lr_ema_decay
    for idx in batches:
        st = refresh_expected_logs(
            VariationalState(alpha_loading=alpha_l, alpha_factors=tuple(alpha_f))
        )
        local = update_local(st, data, columns=idx)
        m = len(idx)
        g_l = np.zeros_like(alpha_l)
        for j in range(m):
            g_l += config.alpha_lambda + t * local.rho[:, j] - alpha_l
        g_l /= m
        g_f = []
        for n in range(data.num_vars):
            acc = np.zeros_like(alpha_f[n])
            for j, col in enumerate(idx):
                sample_grad = config.alpha_factor - alpha_f[n]
                c = int(data.y[n, col])
                if c > 0:
                    sample_grad = sample_grad.copy()
                    sample_grad[c - 1] += t * local.rho[:, j]
                acc += sample_grad
            g_f.append(acc / m)
        if g_ema_l is None:
            g_ema_l, h_ema_l = g_l.copy(), float(g_l @ g_l)
            g_ema_f = [g.copy() for g in g_f]
            h_ema_f = [np.einsum("ir,ir->r", g, g) for g in g_f]
        else:
            g_ema_l = d * g_ema_l + (1 - d) * g_l
            h_ema_l = d * h_ema_l + (1 - d) * float(g_l @ g_l)
            for n in range(data.num_vars):
                g_ema_f[n] = d * g_ema_f[n] + (1 - d) * g_f[n]
                h_ema_f[n] = d * h_ema_f[n] + (1 - d) * np.einsum(
                    "ir,ir->r", g_f[n], g_f[n]
                )
        xi_l = min(max(float(g_ema_l @ g_ema_l) / h_ema_l, 1e-12), 1.0) if h_ema_l > 0 else 1.0
        alpha_l = alpha_l + xi_l * g_l
        for n in range(data.num_vars):
            num = np.einsum("ir,ir->r", g_ema_f[n], g_ema_f[n])
            xi = np.where(h_ema_f[n] > 0, num / h_ema_f[n], 1.0)
            xi = np.clip(xi, 1e-12, 1.0)
            alpha_f[n] = alpha_f[n] + xi[None, :] * g_f[n]
    return VariationalState(alpha_loading=alpha_l, alpha_factors=tuple(alpha_f))


class TestSvbFit:
    def test_requires_holdout(self):
        data, config, _ = problem(t=50)
        bad = SviConfig(init_rank=3, holdout_fraction=0.0, seed=1)
        with pytest.raises(ConfigError):
            svb_fit(data, bad)

    def test_deterministic(self):
        truth = sample_model(3, 4, 2, seed=21)
        data = sample_dataset(truth, 400, 0.2, seed=22)
        config = SviConfig(
            init_rank=4, holdout_fraction=0.1, seed=5,
            max_iters=300, nll_check_interval=20, elbo_tol=1e-4,
        )
        a = svb_fit(data, config)
        b = svb_fit(data, config)
        assert a.detected_rank == b.detected_rank
        assert a.heldout_nll_trace == b.heldout_nll_trace
        assert np.array_equal(a.model.loading, b.model.loading)

    def test_holdout_split_partition(self):
        data, config, _ = problem(t=50)
        train, hold = holdout_split(data, config)
        assert train.num_samples + hold.num_samples == data.num_samples
        assert hold.num_samples == round(0.2 * 50)

    def test_traces_and_batch_recorded(self):
        truth = sample_model(3, 4, 2, seed=23)
        data = sample_dataset(truth, 500, 0.0, seed=24)
        config = SviConfig(
            init_rank=3, holdout_fraction=0.1, seed=6,
            max_iters=200, nll_check_interval=25, elbo_tol=1e-5,
        )
        res = svb_fit(data, config)
        assert res.batch_size == 22  # ceil(sqrt(450))
        assert res.heldout_nll_trace
        assert len(res.learning_rate_trace) == res.iterations
        assert all(0.0 < xi <= 1.0 for xi in res.learning_rate_trace)
