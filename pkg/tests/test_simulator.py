"""Prior sampling, Poisson observation synthesis, and the benchmark builder."""

import json
import math

import numpy as np
import pytest

from pointcat import storage
from pointcat.forward import render_intensity_stack
from pointcat.simulator import (
    DEFAULT_FLUOR_SCALE,
    DEFAULT_GRID,
    DEFAULT_MOTION_COV,
    DEFAULT_PSF_COV,
    BenchmarkManifest,
    BenchmarkRun,
    build_benchmark,
    default_config,
    derive_seed,
    interior_margin,
    sample_catalogue,
    simulate_observations,
)
from pointcat.types import Catalogue, InvariantError, ModelConfig, ObservationStack


def test_benchmark_defaults():
    np.testing.assert_array_equal(DEFAULT_PSF_COV, [[10.0, -2.0], [-2.0, 15.0]])
    np.testing.assert_array_equal(DEFAULT_MOTION_COV, 9.0 * np.eye(2))
    assert DEFAULT_FLUOR_SCALE == 200.0
    assert DEFAULT_GRID == (64, 64)


class TestSampleCatalogue:
    def test_deterministic_per_seed(self):
        config = default_config(3, 4)
        a = sample_catalogue(config, 123)
        b = sample_catalogue(config, 123)
        assert a.allclose(b, rtol=0.0, atol=0.0)

    def test_different_seeds_differ(self):
        config = default_config(3, 4)
        a = sample_catalogue(config, 1)
        b = sample_catalogue(config, 2)
        assert not a.allclose(b)

    def test_positions_respect_margin(self):
        config = default_config(4, 2)
        margin = interior_margin(config)
        for seed in range(20):
            cat = sample_catalogue(config, seed)
            assert np.all(cat.positions >= margin)
            assert np.all(cat.positions <= config.extents - margin)

    def test_margin_too_large_rejected(self):
        config = default_config(1, 1, grid_shape=(16, 16))
        with pytest.raises(InvariantError):
            sample_catalogue(config, 0)

    def test_fluorescence_mean_within_3se(self):
        # pool draws: kappa = 200, n = 10000 -> 200 +/- 3*200/100
        config = default_config(50, 200)  # 10000 entries in one catalogue
        cat = sample_catalogue(config, 7)
        n = cat.fluorescence.size
        assert n == 10000
        se = config.fluor_scale / math.sqrt(n)
        assert abs(cat.fluorescence.mean() - config.fluor_scale) < 3 * se

    def test_momenta_sd_within_tolerance(self):
        # Sigma_motion = 9 I -> per-axis sd 3 +/- 0.1 over 10^4 draws
        config = default_config(50, 100)
        cat = sample_catalogue(config, 8)
        for axis in range(2):
            sd = cat.momenta[:, :, axis].std()
            assert abs(sd - 3.0) < 0.1

    def test_background_halfnormal(self):
        config = default_config(1, 1)
        draws = np.array([sample_catalogue(config, s).background for s in range(3000)])
        assert np.all(draws >= 0)
        # E|N(0, nu^2)| = nu * sqrt(2/pi)
        nu = config.background_scale
        expect = nu * math.sqrt(2.0 / math.pi)
        sd = nu * math.sqrt(1.0 - 2.0 / math.pi)
        assert abs(draws.mean() - expect) < 3 * sd / math.sqrt(len(draws))


class TestSimulateObservations:
    def test_zero_intensity_zero_counts(self):
        config = default_config(1, 2)
        cat = Catalogue(
            positions=np.array([[32.0, 32.0]]),
            fluorescence=np.zeros((1, 2)),
            momenta=np.zeros((1, 2, 2)),
            background=0.0,
        )
        obs = simulate_observations(cat, config, 0)
        assert np.all(obs.counts == 0)

    def test_constant_mean_poisson_moments(self):
        config = ModelConfig(
            dim=2, grid_shape=(64, 64), num_sources=0, num_times=1,
            psf_cov=np.eye(2), motion_cov=np.eye(2),
            fluor_scale=1.0, background_scale=1.0, kernel_bandwidth=1.0)
        cat = Catalogue(positions=np.zeros((0, 2)), fluorescence=np.zeros((0, 1)),
                        momenta=np.zeros((0, 1, 2)), background=4.0)
        obs = simulate_observations(cat, config, 3)
        counts = obs.counts.astype(float)
        n = counts.size
        assert abs(counts.mean() - 4.0) < 3.0 * math.sqrt(4.0 / n)
        assert 0.9 < counts.var() / counts.mean() < 1.1

    def test_deterministic_per_seed(self):
        config = default_config(2, 2)
        cat = sample_catalogue(config, 5)
        a = simulate_observations(cat, config, 10)
        b = simulate_observations(cat, config, 10)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_different_seeds_same_expectation(self):
        config = default_config(2, 2)
        cat = sample_catalogue(config, 6)
        a = simulate_observations(cat, config, 1)
        b = simulate_observations(cat, config, 2)
        assert not np.array_equal(a.counts, b.counts)

    def test_expected_count_identity(self):
        config = default_config(1, 1, grid_shape=(48, 48))
        cat = Catalogue(
            positions=np.array([[24.0, 24.0]]),
            fluorescence=np.array([[150.0]]),
            momenta=np.zeros((1, 1, 2)),
            background=2.0,
        )
        mean = render_intensity_stack(cat, config) + cat.background
        acc = np.zeros_like(mean)
        reps = 200
        for s in range(reps):
            acc += simulate_observations(cat, config, s).counts
        emp = acc / reps
        bound = 3.0 * np.sqrt(mean / reps)
        assert np.all(np.abs(emp - mean) <= np.maximum(bound, 0.5))


class TestBenchmark:
    def test_single_run_roundtrip(self, tmp_path):
        manifest = build_benchmark([2], [4], 1, 0, tmp_path)
        assert len(manifest.runs) == 1
        run = manifest.runs[0]
        truth, config = storage.read_catalogue(run.truth_path)
        assert config.num_sources == 2
        counts, dtype, shape = storage.read_tensor(run.obs_path)
        assert dtype == "u32"
        assert shape == (4, 64, 64)
        again = BenchmarkManifest.load(tmp_path / "manifest.json")
        assert again.base_seed == 0
        assert [r.to_dict() for r in again.runs] == [r.to_dict() for r in manifest.runs]

    def test_grid_run_count(self, tmp_path):
        manifest = build_benchmark([2, 4], [4, 6], 2, 1, tmp_path, grid_shape=(64, 64))
        assert len(manifest.runs) == 2 * 2 * 2

    def test_rerun_identical(self, tmp_path):
        m1 = build_benchmark([2], [4], 2, 5, tmp_path / "a")
        m2 = build_benchmark([2], [4], 2, 5, tmp_path / "b")
        for r1, r2 in zip(m1.runs, m2.runs):
            assert r1.seed == r2.seed
            c1, _ = storage.read_catalogue(r1.truth_path)
            c2, _ = storage.read_catalogue(r2.truth_path)
            assert c1.allclose(c2, rtol=0.0, atol=0.0)
            n1, _, _ = storage.read_tensor(r1.obs_path)
            n2, _, _ = storage.read_tensor(r2.obs_path)
            np.testing.assert_array_equal(n1, n2)

    def test_unique_seeds_enforced(self):
        run = BenchmarkRun(2, 4, (64, 64), 7, "t", "o", "r")
        with pytest.raises(InvariantError):
            BenchmarkManifest(base_seed=0, runs=[run, run])

    def test_empty_lists_rejected(self, tmp_path):
        with pytest.raises(InvariantError):
            build_benchmark([], [4], 1, 0, tmp_path)
        with pytest.raises(InvariantError):
            build_benchmark([2], [4], 0, 0, tmp_path)

    def test_derive_seed_stable_and_distinct(self):
        assert derive_seed(3, 0) == derive_seed(3, 0)
        seeds = {derive_seed(3, k) for k in range(100)}
        assert len(seeds) == 100
