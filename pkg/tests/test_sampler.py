"""HMC transition kernel, adaptation, initialization, and chain summaries."""

import math

import numpy as np
import pytest

from pointcat.posterior import PosteriorContext, to_constrained, to_unconstrained
from pointcat.sampler import (
    DIVERGENCE_THRESHOLD,
    Chain,
    DualAveraging,
    SamplerConfig,
    auto_init,
    count_label_switches,
    dual_averaging_update,
    hmc_step,
    leapfrog,
    posterior_mean_catalogue,
    posterior_mean_intensity,
    run_chain,
    summarize_chain,
)
from pointcat.simulator import default_config, sample_catalogue, simulate_observations
from pointcat.types import Catalogue, InvariantError, ModelConfig, ObservationStack


class Harmonic:
    """U(q) = |q|^2 / 2 test potential."""

    def potential(self, q):
        return 0.5 * float(np.dot(q, q))

    def gradient(self, q):
        return np.asarray(q, dtype=float)


class Quartic:
    """Smooth anharmonic test potential U = |q|^2/2 + |q|^4/4."""

    def potential(self, q):
        s = float(np.dot(q, q))
        return 0.5 * s + 0.25 * s * s

    def gradient(self, q):
        s = float(np.dot(q, q))
        return (1.0 + s) * np.asarray(q, dtype=float)


class GaussianTarget:
    """U for N(mean, diag(var))."""

    def __init__(self, mean, var):
        self.mean = np.asarray(mean, dtype=float)
        self.var = np.asarray(var, dtype=float)

    def potential(self, q):
        return 0.5 * float(np.sum((q - self.mean) ** 2 / self.var))

    def gradient(self, q):
        return (q - self.mean) / self.var


def hamiltonian(target, q, v, mass_diag):
    return target.potential(q) + 0.5 * float(np.sum(v * v / np.asarray(mass_diag)))


# ---------------------------------------------------------------------------
# SamplerConfig


class TestSamplerConfig:
    def test_defaults(self):
        sc = SamplerConfig()
        assert sc.warmup_iters == 1000
        assert sc.sample_iters == 1000
        assert sc.target_accept == 0.9

    def test_rejects_bad_values(self):
        with pytest.raises(InvariantError):
            SamplerConfig(warmup_iters=0)
        with pytest.raises(InvariantError):
            SamplerConfig(target_accept=1.0)
        with pytest.raises(InvariantError):
            SamplerConfig(leapfrog_steps=0)
        with pytest.raises(InvariantError):
            SamplerConfig(init_step_size=0.0)


# ---------------------------------------------------------------------------
# Leapfrog


class TestLeapfrog:
    def test_hand_computed_harmonic_step(self):
        # (q, v) = (1, 0), eps = 0.1, L = 1:
        # v_half = -0.05, q' = 0.995, v' = -0.05 - 0.05*0.995 = -0.09975
        q, v, evals, ok = leapfrog(
            np.array([1.0]), np.array([0.0]), 0.1, 1, np.array([1.0]), Harmonic())
        assert ok
        assert q[0] == pytest.approx(0.995, rel=1e-14)
        assert v[0] == pytest.approx(-0.09975, rel=1e-14)

    def test_gradient_evaluation_count(self):
        class Counting(Harmonic):
            def __init__(self):
                self.calls = 0

            def gradient(self, q):
                self.calls += 1
                return super().gradient(q)

        for num_steps in (1, 5, 16):
            target = Counting()
            _, _, evals, ok = leapfrog(
                np.array([1.0]), np.array([0.5]), 0.1, num_steps, np.array([1.0]), target)
            assert ok
            assert evals == num_steps + 1
            assert target.calls == num_steps + 1

    def test_small_step_limit(self):
        q0 = np.array([1.0, -2.0])
        v0 = np.array([0.3, 0.7])
        q, v, _, _ = leapfrog(q0, v0, 1e-9, 3, np.ones(2), Harmonic())
        np.testing.assert_allclose(q, q0, atol=1e-8)
        np.testing.assert_allclose(v, v0, atol=1e-8)

    def test_reversibility(self):
        rng = np.random.default_rng(0)
        for target in (Harmonic(), Quartic()):
            for _ in range(20):
                q0 = rng.normal(size=4)
                v0 = rng.normal(size=4)
                mass = rng.uniform(0.5, 2.0, size=4)
                q1, v1, _, _ = leapfrog(q0, v0, 0.05, 25, mass, target)
                q2, v2, _, _ = leapfrog(q1, -v1, 0.05, 25, mass, target)
                assert np.max(np.abs(q2 - q0)) < 1e-8
                assert np.max(np.abs(-v2 - v0)) < 1e-8

    def test_energy_error_quadratic_in_step_size(self):
        rng = np.random.default_rng(1)
        target = Harmonic()
        mass = np.ones(3)
        total_time = 1.0
        errs = {}
        for eps in (0.05, 0.025):
            steps = int(round(total_time / eps))
            dhs = []
            for _ in range(50):
                q0 = rng.normal(size=3)
                v0 = rng.normal(size=3)
                h0 = hamiltonian(target, q0, v0, mass)
                q1, v1, _, _ = leapfrog(q0, v0, eps, steps, mass, target)
                dhs.append(abs(hamiltonian(target, q1, v1, mass) - h0))
            errs[eps] = np.median(dhs)
        factor = errs[0.05] / errs[0.025]
        assert 3.0 <= factor <= 5.0

    def test_divergence_flag_on_nonfinite_gradient(self):
        class Exploding:
            def potential(self, q):
                return math.inf

            def gradient(self, q):
                return np.full(q.shape, np.nan)

        _, _, _, ok = leapfrog(np.ones(2), np.ones(2), 0.1, 3, np.ones(2), Exploding())
        assert not ok


# ---------------------------------------------------------------------------
# HMC step


class TestHmcStep:
    def test_tiny_step_accepts(self):
        rng = np.random.default_rng(2)
        alphas = []
        q = np.array([0.5, -0.5])
        for _ in range(50):
            q, accepted, alpha, _, div = hmc_step(q, 1e-4, 5, np.ones(2), Harmonic(), rng)
            assert not div
            alphas.append(alpha)
        assert np.mean(alphas) > 0.999

    def test_divergent_proposal_rejected(self):
        class Cliff:
            def potential(self, q):
                return 0.0 if q[0] < 1.0 else 2.0 * DIVERGENCE_THRESHOLD

            def gradient(self, q):
                return np.zeros_like(q)

        rng = np.random.default_rng(3)
        q0 = np.array([0.0])
        # big step pushes past the cliff
        q, accepted, alpha, _, div = hmc_step(q0, 5.0, 1, np.ones(1), Cliff(), rng)
        if div:
            assert not accepted
            assert alpha == 0.0
            np.testing.assert_array_equal(q, q0)

    def test_gaussian_target_moments(self):
        target = GaussianTarget(mean=[1.0, -2.0], var=[1.0, 4.0])
        rng = np.random.default_rng(4)
        q = np.zeros(2)
        draws = []
        for it in range(13000):
            q, _, _, _, _ = hmc_step(q, 0.25, 12, np.ones(2), target, rng)
            if it >= 1000:
                draws.append(q.copy())
        draws = np.array(draws)
        # 3 MC standard errors with a conservative ESS deflation
        n_eff = len(draws) / 10.0
        for j, (mu, var) in enumerate(((1.0, 1.0), (-2.0, 4.0))):
            se = math.sqrt(var / n_eff)
            assert abs(draws[:, j].mean() - mu) < 3 * se
            assert 0.7 * var < draws[:, j].var() < 1.3 * var


# ---------------------------------------------------------------------------
# Dual averaging


class TestDualAveraging:
    def test_on_target_stays_near_init(self):
        da = DualAveraging(0.1, 0.8)
        for _ in range(100):
            dual_averaging_update(da, 0.8)
        # zero error signal: log eps never moves away from mu's fixed point
        assert abs(da.h_bar) < 1e-12
        assert da.step_size == pytest.approx(math.exp(da.mu), rel=1e-9)

    def test_zero_acceptance_shrinks_step(self):
        da = DualAveraging(0.1, 0.8)
        # the first update is pulled toward mu = log(10 * eps0) by design, so
        # monotone shrinkage is asserted from the second update on
        dual_averaging_update(da, 0.0)
        prev = da.step_size
        shrinking = 0
        for _ in range(50):
            dual_averaging_update(da, 0.0)
            if da.step_size < prev:
                shrinking += 1
            prev = da.step_size
        assert shrinking == 50

    def test_full_acceptance_grows_step(self):
        da = DualAveraging(0.1, 0.8)
        for _ in range(50):
            da.update(1.0)
        assert da.step_size > 0.1

    def test_calibrates_gaussian_target(self):
        # anisotropic scales avoid leapfrog resonance artifacts of the
        # isotropic normal; the averaged step overshoots the target slightly
        # because acceptance is concave in the oscillating warm-up step size
        target = GaussianTarget(mean=np.zeros(4), var=[0.3, 1.0, 2.5, 6.0])
        rng = np.random.default_rng(5)
        da = DualAveraging(0.5, 0.8)
        q = np.zeros(4)
        eps = 0.5
        for _ in range(800):
            q, _, alpha, _, _ = hmc_step(q, eps, 8, np.ones(4), target, rng)
            eps = da.update(alpha)
        eps = da.averaged_step_size
        alphas = []
        for _ in range(1500):
            q, _, alpha, _, _ = hmc_step(q, eps, 8, np.ones(4), target, rng)
            alphas.append(alpha)
        assert 0.8 - 0.07 <= np.mean(alphas) <= 0.8 + 0.08


# ---------------------------------------------------------------------------
# run_chain on the real posterior (small instances)


def small_benchmark(seed=0, num_sources=1, num_times=2, grid=(24, 24)):
    config = ModelConfig(
        dim=2,
        grid_shape=grid,
        num_sources=num_sources,
        num_times=num_times,
        psf_cov=2.0 * np.eye(2),
        motion_cov=np.eye(2),
        fluor_scale=100.0,
        background_scale=2.0,
        kernel_bandwidth=6.0,
    )
    rng = np.random.default_rng(seed)
    truth = Catalogue(
        positions=rng.uniform(8, 16, size=(num_sources, 2)),
        fluorescence=rng.uniform(80, 200, size=(num_sources, num_times)),
        momenta=rng.normal(0, 1, size=(num_sources, num_times, 2)),
        background=1.5,
    )
    obs = simulate_observations(truth, config, seed + 1)
    return config, truth, obs


class TestRunChain:
    def test_seed_determinism(self):
        config, _, obs = small_benchmark()
        sc = SamplerConfig(warmup_iters=30, sample_iters=30, leapfrog_steps=5,
                           init_step_size=0.02, seed=7)
        c1 = run_chain(obs, config, sc)
        c2 = run_chain(obs, config, sc)
        assert len(c1) == len(c2) == 30
        for a, b in zip(c1.draws, c2.draws):
            assert a.allclose(b, rtol=0.0, atol=0.0)
        np.testing.assert_array_equal(c1.energies, c2.energies)
        np.testing.assert_array_equal(c1.mass_diag, c2.mass_diag)

    def test_adaptation_frozen_after_warmup(self):
        config, _, obs = small_benchmark()
        sc = SamplerConfig(warmup_iters=40, sample_iters=25, leapfrog_steps=5,
                           init_step_size=0.02, seed=8)
        chain = run_chain(obs, config, sc)
        assert np.all(chain.step_size_trace == chain.step_size_trace[0])

    def test_draws_valid_catalogues(self):
        config, _, obs = small_benchmark()
        sc = SamplerConfig(warmup_iters=30, sample_iters=20, leapfrog_steps=5,
                           init_step_size=0.02, seed=9)
        chain = run_chain(obs, config, sc)
        for cat in chain.draws:
            cat.validate(config)

    def test_explicit_init(self):
        config, truth, obs = small_benchmark()
        sc = SamplerConfig(warmup_iters=20, sample_iters=10, leapfrog_steps=5,
                           init_step_size=0.01, seed=10)
        chain = run_chain(obs, config, sc, init=truth)
        assert len(chain) == 10

    def test_bad_init_policy_rejected(self):
        config, _, obs = small_benchmark()
        sc = SamplerConfig(warmup_iters=5, sample_iters=5)
        with pytest.raises(InvariantError):
            run_chain(obs, config, sc, init="magic")

    def test_all_zero_observations_allowed(self):
        config, _, _ = small_benchmark()
        obs = ObservationStack(counts=np.zeros((2, 24, 24), dtype=int))
        sc = SamplerConfig(warmup_iters=20, sample_iters=10, leapfrog_steps=5,
                           init_step_size=0.02, seed=11)
        chain = run_chain(obs, config, sc)
        assert len(chain) == 10


class TestAutoInit:
    def test_recovers_bright_isolated_sources(self):
        config = default_config(2, 4, (64, 64))
        truth = Catalogue(
            positions=np.array([[20.0, 20.0], [44.0, 44.0]]),
            fluorescence=np.full((2, 4), 300.0),
            momenta=np.zeros((2, 4, 2)),
            background=1.0,
        )
        obs = simulate_observations(truth, config, 42)
        rng = np.random.default_rng(0)
        init = auto_init(obs, config, rng)
        init.validate(config)
        # each true source has an init source within a few voxels
        d = np.linalg.norm(
            truth.positions[:, None, :] - init.positions[None, :, :], axis=-1)
        assert d.min(axis=1).max() < 4.0

    def test_empty_model(self):
        config = default_config(0, 2, (16, 16))
        obs = ObservationStack(counts=np.full((2, 16, 16), 3))
        init = auto_init(obs, config, np.random.default_rng(1))
        assert init.positions.shape == (0, 2)
        assert init.background == pytest.approx(3.0)

    def test_momenta_start_at_zero(self):
        config = default_config(2, 3, (64, 64))
        truth = sample_catalogue(config, 5)
        obs = simulate_observations(truth, config, 6)
        init = auto_init(obs, config, np.random.default_rng(2))
        np.testing.assert_array_equal(init.momenta, np.zeros((2, 3, 2)))


# ---------------------------------------------------------------------------
# Summaries


def fake_chain(draws_value, config, n=20, seed=0):
    """Chain whose draws are supplied externally (diagnostics-only tests)."""
    draws = [
        Catalogue(
            positions=v[: config.num_sources * config.dim].reshape(
                config.num_sources, config.dim),
            fluorescence=v[config.num_sources * config.dim:
                           config.num_sources * (config.dim + config.num_times)].reshape(
                config.num_sources, config.num_times),
            momenta=v[config.num_sources * (config.dim + config.num_times): -1].reshape(
                config.num_sources, config.num_times, config.dim),
            background=float(v[-1]),
        )
        for v in draws_value
    ]
    m = len(draws)
    return Chain(
        config=config,
        draws=draws,
        energies=np.zeros(m),
        accept_flags=np.ones(m, dtype=bool),
        accept_probs=np.ones(m),
        step_size_trace=np.full(m, 0.1),
        mass_diag=np.ones(config.num_parameters),
        seed=seed,
    )


class TestSummaries:
    def _iid_chain(self, seed, n=2000):
        config = ModelConfig(
            dim=2, grid_shape=(8, 8), num_sources=1, num_times=1,
            psf_cov=np.eye(2), motion_cov=np.eye(2),
            fluor_scale=10.0, background_scale=1.0, kernel_bandwidth=5.0)
        rng = np.random.default_rng(seed)
        vecs = rng.standard_normal((n, config.num_parameters))
        # keep positions inside the box and positive scales
        vecs[:, 0:2] = 4.0 + 0.5 * vecs[:, 0:2]
        vecs[:, 2] = 10.0 + vecs[:, 2]
        vecs[:, -1] = 5.0 + vecs[:, -1]
        return fake_chain(vecs, config, seed=seed), vecs

    def test_iid_normal_sanity(self):
        chain, vecs = self._iid_chain(0, n=4000)
        summary = summarize_chain(chain)
        j = 3  # a momenta coordinate: mean 0, sd 1
        assert abs(summary.mean[j]) < 3.0 / math.sqrt(4000)
        assert 0.5 * 4000 <= summary.ess[j] <= 1.5 * 4000

    def test_quantiles_nondecreasing(self):
        chain, _ = self._iid_chain(1, n=500)
        summary = summarize_chain(chain)
        assert np.all(np.diff(summary.quantiles, axis=0) >= 0)

    def test_constant_chain_degenerate_ess(self):
        config = ModelConfig(
            dim=2, grid_shape=(8, 8), num_sources=1, num_times=1,
            psf_cov=np.eye(2), motion_cov=np.eye(2),
            fluor_scale=10.0, background_scale=1.0, kernel_bandwidth=5.0)
        vec = np.array([4.0, 4.0, 10.0, 0.0, 0.0, 2.0])
        chain = fake_chain(np.tile(vec, (50, 1)), config)
        summary = summarize_chain(chain)
        assert np.all(summary.sd == 0.0)
        assert np.all(np.isnan(summary.ess))

    def test_two_identical_chains_rhat_near_one(self):
        chain, _ = self._iid_chain(2, n=1000)
        summary = summarize_chain([chain, chain])
        assert summary.rhat is not None
        # identical chains: between-chain variance comes only from the
        # split-half means, so R-hat approaches 1 at the 1/sqrt(n) scale
        assert np.all(np.abs(summary.rhat - 1.0) < 0.05)

    def test_single_chain_no_rhat(self):
        chain, _ = self._iid_chain(3, n=200)
        assert summarize_chain(chain).rhat is None

    def test_unequal_lengths_rejected(self):
        c1, _ = self._iid_chain(4, n=100)
        c2, _ = self._iid_chain(5, n=90)
        with pytest.raises(InvariantError):
            summarize_chain([c1, c2])

    def test_posterior_mean_catalogue(self):
        chain, vecs = self._iid_chain(6, n=300)
        mean_cat = posterior_mean_catalogue(chain)
        np.testing.assert_allclose(mean_cat.background, vecs[:, -1].mean(), rtol=1e-12)
        np.testing.assert_allclose(
            mean_cat.positions.ravel(), vecs[:, 0:2].mean(axis=0), rtol=1e-12)

    def test_posterior_mean_intensity_shape(self):
        config, _, obs = small_benchmark()
        sc = SamplerConfig(warmup_iters=15, sample_iters=10, leapfrog_steps=3,
                           init_step_size=0.01, seed=12)
        chain = run_chain(obs, config, sc)
        lam = posterior_mean_intensity(chain, thin=2)
        assert lam.shape == (2, 24, 24)
        assert np.all(lam >= 0)

    def test_label_switch_counter(self):
        config = ModelConfig(
            dim=2, grid_shape=(32, 32), num_sources=2, num_times=1,
            psf_cov=np.eye(2), motion_cov=np.eye(2),
            fluor_scale=10.0, background_scale=1.0, kernel_bandwidth=5.0)
        a = np.array([5.0, 5.0, 25.0, 25.0, 10.0, 10.0, 0, 0, 0, 0, 1.0])
        b = a.copy()
        b[0:4] = [25.0, 25.0, 5.0, 5.0]  # swapped labels
        stable = fake_chain(np.tile(a, (40, 1)), config)
        assert count_label_switches(stable) == 0
        swapped = fake_chain(np.vstack([np.tile(a, (20, 1)), np.tile(b, (20, 1))]),
                             config)
        assert count_label_switches(swapped) == 1
