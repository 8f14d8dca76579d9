import math

import numpy as np
import pytest
from scipy import special

from ccgpfa.augdist import ptn_moments, ptn_sample
from ccgpfa.data import SpikeData, simulate
from ccgpfa.gp import GaussianDensity, kernel_matrix
from ccgpfa.inference import (FitError, FitOptions, bias_natural, cavi_sweep, compute_elbo,
                              elbo_terms, fit, latent_kl, natgrad_step, update_bias,
                              update_dispersion, update_inducing, update_latents_dense,
                              update_precisions, update_weights, weight_natural)
from ccgpfa.model import (DispersionPosterior, LatentPosterior, ModelConfig, PrecisionPosterior, WeightPosterior,
                          init_state, latent_marginals_from_inducing, project_inducing,
                          refresh_augmented)
from ccgpfa.specfun import EULER_GAMMA

from conftest import small_problem
from oracles import gradient_agrees


def silence_data(state):
    state.augmented.omega_mean = np.zeros_like(state.augmented.omega_mean)
    state.augmented.kappa = np.zeros_like(state.augmented.kappa)
    return state


def perturbation_never_helps(state, stats, attr, n_trials=20, eps=1e-3, seed=0):
    """Random perturbations of ``state.<attr>`` never raise the ELBO."""
    rng = np.random.default_rng(seed)
    base = compute_elbo(state, stats)
    obj, name = attr
    target = getattr(getattr(state, obj), name)
    original = target.copy()
    for _ in range(n_trials):
        step = rng.standard_normal(original.shape)
        target[...] = original + eps * step / np.linalg.norm(step)
        assert compute_elbo(state, stats) <= base + 1e-8 * abs(base)
    target[...] = original


def sparse_twin(dense_state, stats):
    """Sparse state with M = T aligned inducing points holding the dense posterior."""
    cfg = ModelConfig(**{**dense_state.config.to_dict(), "n_inducing": dense_state.n_bins,
                         "lengthscales": tuple(dense_state.lengthscales)})
    twin = dense_state.copy()
    twin.config = cfg
    lat = dense_state.latents
    twin.latents = LatentPosterior(mean=lat.mean.copy(), var=lat.var.copy(),
                                   inducing_mean=lat.mean.copy(), inducing_cov=lat.cov.copy(),
                                   inducing_grid=np.linspace(1.0, dense_state.n_bins, dense_state.n_bins))
    latent_marginals_from_inducing(twin)
    return twin


class TestWeights:
    def test_prior_recovery(self):
        _, _, _, state = small_problem(seed=1, sweeps=1)
        w = update_weights(silence_data(state))
        assert np.allclose(w.mean, 0.0)
        assert np.allclose(w.cov, np.diag(1.0 / state.precisions.ard_mean)[None])

    def test_scalar_case(self):
        data = SpikeData(np.array([[[4]]]))
        cfg = ModelConfig(n_latents=1, lengthscales=(2.0,))
        state = init_state(cfg, data, seed=0)
        om, ka = state.augmented.omega_mean[0, 0], state.augmented.kappa[0, 0]
        mu, v = state.latents.mean[0, 0], state.latents.var[0, 0]
        tau, beta = state.precisions.ard_mean[0], state.bias.mean[0]
        S = 1.0 / (tau + om * (mu * mu + v))
        w = update_weights(state)
        assert abs(w.cov[0, 0, 0] - S) < 1e-12 * S
        assert abs(w.mean[0, 0] - S * mu * (ka - om * beta)) < 1e-12

    def test_coordinate_maximiser(self):
        for seed in range(3):
            _, _, stats, state = small_problem(seed=seed, n_neurons=3, n_bins=4, sweeps=2)
            state.weights = update_weights(state)
            perturbation_never_helps(state, stats, ("weights", "mean"), seed=seed)
            perturbation_never_helps(state, stats, ("weights", "cov"), eps=1e-5, seed=seed)


class TestBias:
    def test_prior_recovery(self):
        _, _, _, state = small_problem(seed=2, sweeps=1)
        b = update_bias(silence_data(state))
        assert np.allclose(b.mean, 0.0) and np.allclose(b.var, 1.0 / state.precisions.bias_mean)

    def test_symmetric_data(self):
        _, _, _, state = small_problem(seed=2, sweeps=1)
        state.weights.mean[:] = 0.0
        state.augmented.kappa = state.augmented.kappa - state.augmented.kappa.mean(axis=1, keepdims=True)
        assert np.allclose(update_bias(state).mean, 0.0, atol=1e-12)

    def test_coordinate_maximiser(self):
        _, _, stats, state = small_problem(seed=3, sweeps=2)
        state.bias = update_bias(state)
        perturbation_never_helps(state, stats, ("bias", "mean"))
        perturbation_never_helps(state, stats, ("bias", "var"), eps=1e-5)


class TestPrecisions:
    def test_substitution(self):
        _, _, _, state = small_problem(seed=0, n_neurons=2, n_latents=1)
        state.weights = WeightPosterior(np.array([[1.0], [0.0]]), np.array([[[0.0]], [[1.0]]]))
        p = update_precisions(state)
        assert abs(p.ard_shape[0] - 1.00001) < 1e-12 and abs(p.ard_rate[0] - 1.00001) < 1e-12
        assert abs(p.ard_mean[0] - 1.0) < 1e-12

    def test_shutoff(self):
        _, _, _, state = small_problem(seed=0, n_neurons=4, n_latents=1)
        state.weights = WeightPosterior(np.zeros((4, 1)), np.zeros((4, 1, 1)))
        p = update_precisions(state)
        assert p.ard_rate[0] == state.config.ard_rate and p.ard_shape[0] == state.config.ard_shape + 2
        assert p.ard_mean[0] > 1e5

    def test_coordinate_maximiser(self):
        _, _, stats, state = small_problem(seed=4, sweeps=2)
        state.precisions = update_precisions(state)
        base = compute_elbo(state, stats)
        p = state.precisions
        for factor in (0.999, 1.001):
            state.precisions = PrecisionPosterior(p.ard_shape * factor, p.ard_rate, p.bias_shape, p.bias_rate)
            assert compute_elbo(state, stats) <= base
            state.precisions = PrecisionPosterior(p.ard_shape, p.ard_rate * factor, p.bias_shape, p.bias_rate * factor)
            assert compute_elbo(state, stats) <= base


class TestLatentsDense:
    def test_prior_recovery(self):
        _, _, _, state = small_problem(seed=5, sweeps=1)
        lat = update_latents_dense(silence_data(state))
        K = kernel_matrix(state.config.kernel(state.lengthscales[0]), state.grid)
        assert np.allclose(lat.mean, 0.0) and np.allclose(lat.cov[0], K, atol=1e-12)

    def test_gp_regression_oracle(self):
        _, _, stats, state = small_problem(seed=6, n_neurons=1, n_latents=1, n_bins=25, sweeps=1)
        state.weights = WeightPosterior(np.ones((1, 1)), np.zeros((1, 1, 1)))
        state.bias.mean[:] = 0.0
        state.bias.var[:] = 0.0
        om, ka = state.augmented.omega_mean[0], state.augmented.kappa[0]
        K = kernel_matrix(state.config.kernel(state.lengthscales[0]), state.grid)
        z = ka / om
        gain = K @ np.linalg.inv(K + np.diag(1.0 / om))
        lat = update_latents_dense(state)
        assert np.allclose(lat.mean[0], gain @ z, atol=1e-8)
        assert np.allclose(lat.cov[0], K - gain @ K, atol=1e-8)

    def test_coordinate_maximiser(self):
        _, _, stats, state = small_problem(seed=7, n_bins=12, sweeps=2)
        state.latents = update_latents_dense(state)
        last = state.n_latents - 1
        rng = np.random.default_rng(0)
        base = compute_elbo(state, stats)
        for _ in range(20):
            trial = state.copy()
            trial.latents.mean[last] += 1e-3 * rng.standard_normal(state.n_bins)
            assert compute_elbo(trial, stats) <= base + 1e-8 * abs(base)


class TestInducing:
    def test_matches_dense_when_aligned(self):
        _, _, stats, dense = small_problem(seed=8, n_neurons=5, n_bins=40, n_latents=2, sweeps=3)
        sparse = sparse_twin(dense, stats)
        for _ in range(2):
            dense.latents = update_latents_dense(dense)
            sparse.latents = update_inducing(sparse)
            rel = np.max(np.abs(sparse.latents.mean - dense.latents.mean)) / np.max(np.abs(dense.latents.mean))
            assert rel < 1e-6
        e_dense, e_sparse = compute_elbo(dense, stats), compute_elbo(sparse, stats)
        assert abs(e_dense - e_sparse) < 1e-5 * abs(e_dense)

    def test_prior_recovery(self):
        _, _, _, state = small_problem(seed=9, n_inducing=8, sweeps=1)
        lat = update_inducing(silence_data(state))
        Kmm = kernel_matrix(state.config.kernel(state.lengthscales[0]), lat.inducing_grid)
        assert np.allclose(lat.inducing_mean, 0.0) and np.allclose(lat.inducing_cov[0], Kmm, atol=1e-10)

    def test_projector_reproduces_constants(self):
        cfg = ModelConfig(n_latents=1, jitter=1e-8)
        grid = np.arange(1.0, 31.0)
        z = np.linspace(1.0, 30.0, 6)
        _, _, A = project_inducing(cfg, grid, 60.0, z, np.zeros(6), np.eye(6))
        assert np.allclose(A.sum(axis=1), 1.0, atol=1e-3)

    def test_coordinate_maximiser(self):
        _, _, stats, state = small_problem(seed=10, n_inducing=8, n_latents=1, sweeps=2)
        state.latents = update_inducing(state)
        base = compute_elbo(state, stats)
        rng = np.random.default_rng(1)
        for _ in range(20):
            trial = state.copy()
            lat = trial.latents
            lat.inducing_mean[0] += 1e-3 * rng.standard_normal(8)
            latent_marginals_from_inducing(trial)
            assert compute_elbo(trial, stats) <= base + 1e-8 * abs(base)


class TestDispersion:
    def test_clipping(self):
        stats = SpikeData(np.array([[[2]]]))
        state = init_state(ModelConfig(n_latents=1, dispersion_rule="literal", clip_threshold=8.0),
                           stats, seed=0)
        state.bias.mean[:] = 50.0
        high = update_dispersion(state, stats).lin[0]
        state.bias.mean[:] = 8.0
        assert update_dispersion(state, stats).lin[0] == high

    def test_single_bin_example(self):
        data = SpikeData(np.array([[[1]]]))
        state = init_state(ModelConfig(n_latents=1, dispersion_rule="literal"), data, seed=0)
        state.weights.mean[:] = 0.0
        state.bias.mean[:] = 0.0
        state.augmented.xi_mean = np.array([0.5])
        state.augmented.log_tau_sum = np.array([[special.digamma(2.0)]])
        d = update_dispersion(state, data)
        assert d.power[0] == 1.0 and d.quad[0] == 0.5
        assert abs(d.lin[0] - (1.0 - math.log(2.0))) < 1e-12
        x = ptn_sample(1.0, 0.5, 1.0 - math.log(2.0), 2_000_000, seed=0)
        assert abs(d.mean[0] - x.mean()) < 4 * x.std() / math.sqrt(x.size)
        assert abs(d.mean[0] - ptn_moments(1.0, 0.5, 1.0 - math.log(2.0))[0]) < 1e-10

    def test_power_scales_with_trials(self):
        _, _, stats, state = small_problem(seed=12, n_bins=100, n_trials=5, n_latents=1)
        assert np.all(update_dispersion(state, stats).power == 500.0)

    def test_exact_rule_is_coordinate_maximiser(self):
        """With clipping inactive the PTN update maximises the bound over q(r)."""
        _, _, stats, state = small_problem(seed=13, sweeps=3)
        state.dispersion = update_dispersion(state, stats)
        refresh_augmented(state, stats)
        base = compute_elbo(state, stats)
        d = state.dispersion
        for dq, dl in [(1.01, 0), (0.99, 0), (1, 0.5), (1, -0.5)]:
            trial = state.copy()
            trial.dispersion = DispersionPosterior.from_params(d.power, d.quad * dq, d.lin + dl)
            refresh_augmented(trial, stats)
            assert compute_elbo(trial, stats) <= base + 1e-9 * abs(base)

    def test_binomial_rejected(self):
        _, _, stats, state = small_problem(seed=0, observation="binomial")
        with pytest.raises(ValueError):
            update_dispersion(state, stats)


class TestNaturalGradient:
    def test_full_batch_equals_cavi(self):
        for seed in range(10):
            _, _, stats, state = small_problem(seed=seed, n_neurons=6, n_bins=30, n_inducing=10,
                                               sweeps=seed % 3)
            ng = natgrad_step(state, stats, None, 1.0)
            ref = state.copy()
            ref.weights = update_weights(ref)
            ref.bias = update_bias(ref)
            ref.latents = update_inducing(ref)
            assert np.allclose(ng.weights.mean, ref.weights.mean, rtol=1e-8, atol=1e-10)
            assert np.allclose(ng.weights.cov, ref.weights.cov, rtol=1e-8, atol=1e-10)
            assert np.allclose(ng.bias.mean, ref.bias.mean, rtol=1e-8, atol=1e-10)
            assert np.allclose(ng.latents.inducing_mean, ref.latents.inducing_mean, rtol=1e-8, atol=1e-8)
            assert np.allclose(ng.latents.inducing_cov, ref.latents.inducing_cov, rtol=1e-8, atol=1e-8)

    def test_zero_step(self):
        _, _, stats, state = small_problem(seed=1, n_inducing=6, sweeps=1)
        out = natgrad_step(state, stats, np.arange(5), 0.0)
        assert np.array_equal(out.weights.mean, state.weights.mean)
        assert np.array_equal(out.latents.inducing_cov, state.latents.inducing_cov)

    def test_minibatch_targets_unbiased(self):
        _, _, _, state = small_problem(seed=2, n_bins=20, n_inducing=6, sweeps=1)
        halves = np.arange(0, 20, 2), np.arange(1, 20, 2)
        for builder in (weight_natural, bias_natural):
            full = builder(state)
            parts = [builder(state, h) for h in halves]
            assert np.allclose(0.5 * (parts[0].eta1 + parts[1].eta1), full.eta1)
            assert np.allclose(0.5 * (parts[0].eta2 + parts[1].eta2), full.eta2)

    def test_input_not_modified(self):
        _, _, stats, state = small_problem(seed=3, n_inducing=6, sweeps=1)
        before = state.copy()
        natgrad_step(state, stats, np.arange(4), 0.7)
        assert np.array_equal(before.latents.inducing_mean, state.latents.inducing_mean)


class TestElbo:
    def test_monotone_sweeps(self):
        for seed in range(3):
            _, _, stats, state = small_problem(seed=seed, n_neurons=8, n_bins=30)
            prev = compute_elbo(state, stats)
            for _ in range(15):
                state = cavi_sweep(state, stats)
                now = compute_elbo(state, stats)
                assert now >= prev - 1e-6 * abs(prev)
                prev = now

    def test_prior_matched_gaussian_kl_zero(self):
        _, _, stats, state = small_problem(seed=0, n_latents=2)
        D, N = 2, state.n_neurons
        big = 1e12
        state.precisions = PrecisionPosterior(np.full(D, big), np.full(D, big), big, big)
        state.weights = WeightPosterior(np.zeros((N, D)), np.tile(np.eye(D), (N, 1, 1)))
        state.bias.mean[:] = 0.0
        state.bias.var[:] = 1.0
        K = [kernel_matrix(state.config.kernel(l), state.grid) for l in state.lengthscales]
        state.latents = LatentPosterior(mean=np.zeros((D, state.n_bins)),
                                        var=np.array([np.diag(k) for k in K]), cov=np.array(K))
        terms = elbo_terms(state, stats)
        assert abs(latent_kl(state)) < 1e-10
        assert abs(terms["kl_weights"]) < 1e-9 and abs(terms["kl_bias"]) < 1e-9

    def test_expected_loglik_matches_monte_carlo_bound(self):
        """The PG term equals E_q[log p(y | f)] minus a non-negative gap."""
        _, _, stats, state = small_problem(seed=4, observation="binomial", sweeps=3)
        terms = elbo_terms(state, stats)
        from ccgpfa.model import f_moments
        from ccgpfa.augdist import binomial_logpmf
        Ef, Ef2 = f_moments(state)
        rng = np.random.default_rng(0)
        sd = np.sqrt(Ef2 - Ef ** 2)
        f = Ef + sd * rng.standard_normal((2000,) + Ef.shape)
        ll = np.mean(np.sum(binomial_logpmf(stats.counts[None], state.total_count[None, None, :, None],
                                            f[:, None]), axis=(1, 2, 3)))
        assert terms["pg"] + terms["count_base"] <= ll


class TestFit:
    def test_deterministic(self):
        data, _ = simulate(5, 20, 1, 3, 4.0, seed=0)
        cfg = ModelConfig(n_latents=1)
        opts = FitOptions(max_em_iters=3, seed=2)
        _, r1 = fit(data, cfg, opts)
        _, r2 = fit(data, cfg, opts)
        assert r1.elbo_trace == r2.elbo_trace

    def test_report_lines(self):
        data, _ = simulate(5, 20, 1, 3, 4.0, seed=0)
        _, rep = fit(data, ModelConfig(n_latents=1), FitOptions(max_em_iters=2))
        lines = rep.lines()
        assert len(lines) == rep.n_iters and lines[0].startswith("iter=0 elbo=")
        assert "theta=[" in lines[0] and "time=" in lines[0]

    def test_near_silent_data(self):
        counts = np.zeros((3, 4, 30), dtype=int)
        counts[0, 0, 5] = 1
        state, rep = fit(SpikeData(counts), ModelConfig(n_latents=1), FitOptions(max_em_iters=5))
        from ccgpfa.evaluate import predicted_rates
        assert np.all(np.isfinite(rep.elbo_trace))
        assert predicted_rates(state).max() < 0.05

    def test_mode_config_mismatch(self):
        data, _ = simulate(5, 20, 1, 3, 4.0, seed=0)
        with pytest.raises(ValueError):
            fit(data, ModelConfig(n_latents=1), FitOptions(mode="sparse"))

    def test_sparse_natgrad_improves(self):
        data, _ = simulate(8, 40, 1, 4, 6.0, seed=3)
        cfg = ModelConfig(n_latents=1, n_inducing=10, batch_size=20, step_size=0.5)
        _, rep = fit(data, cfg, FitOptions(mode="sparse_natgrad", max_em_iters=3, e_step_sweeps=30))
        assert rep.elbo_trace[-1] > rep.elbo_trace[0]

    def test_numerical_failure_keeps_state(self, monkeypatch):
        import ccgpfa.inference as inf
        data, _ = simulate(5, 20, 1, 3, 4.0, seed=0)
        calls = {"n": 0}
        real = inf.compute_elbo

        def flaky(state, stats):
            calls["n"] += 1
            return real(state, stats) if calls["n"] < 4 else float("nan")

        monkeypatch.setattr(inf, "compute_elbo", flaky)
        with pytest.raises(FitError) as info:
            fit(data, ModelConfig(n_latents=1), FitOptions(max_em_iters=3))
        assert info.value.state is not None and len(info.value.report.elbo_trace) == 3

    def test_mstep_gradient_mid_fit(self):
        data, _ = simulate(6, 40, 2, 3, [3.0, 8.0], seed=5)
        states = []
        fit(data, ModelConfig(n_latents=2, lengthscales=(5.0,)), FitOptions(max_em_iters=4),
            callback=lambda it, s, r: states.append(s.copy()))
        checked = 0
        for s in states:
            for d in range(2):
                q = GaussianDensity(s.latents.mean[d], s.latents.cov[d])
                for ell in (s.lengthscales[d], 0.7 * s.lengthscales[d], 1.5 * s.lengthscales[d]):
                    ok, g, fd = gradient_agrees(ell, q, s.grid, s.config.kernel(ell))
                    assert ok, (ell, g, fd)
                    checked += 1
        assert checked >= 12
