"""Ground-truth catalogue sampling from the priors and Poisson observation
synthesis, plus the benchmark grid over (num_sources, num_times)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .forward import render_intensity_stack
from .types import Catalogue, InvariantError, ModelConfig, ObservationStack

# benchmark defaults (2-D)
DEFAULT_GRID = (64, 64)
DEFAULT_PSF_COV = np.array([[10.0, -2.0], [-2.0, 15.0]])
DEFAULT_MOTION_COV = 9.0 * np.eye(2)
DEFAULT_FLUOR_SCALE = 200.0
DEFAULT_BACKGROUND_SCALE = 2.0
DEFAULT_KERNEL_BANDWIDTH = 10.0


def default_config(num_sources: int, num_times: int,
                   grid_shape: tuple[int, ...] = DEFAULT_GRID) -> ModelConfig:
    """Benchmark model configuration with the standard 2-D parameters."""
    return ModelConfig(
        dim=len(grid_shape),
        grid_shape=grid_shape,
        num_sources=num_sources,
        num_times=num_times,
        psf_cov=DEFAULT_PSF_COV.copy(),
        motion_cov=DEFAULT_MOTION_COV.copy(),
        fluor_scale=DEFAULT_FLUOR_SCALE,
        background_scale=DEFAULT_BACKGROUND_SCALE,
        kernel_bandwidth=DEFAULT_KERNEL_BANDWIDTH,
    )


def interior_margin(config: ModelConfig) -> float:
    """Placement margin keeping PSF mass inside the grid: 6 * max PSF sigma."""
    return 6.0 * float(np.sqrt(np.linalg.eigvalsh(config.psf_cov).max()))


def sample_catalogue(config: ModelConfig, seed: int) -> Catalogue:
    """Draw a ground-truth catalogue from the priors.

    Positions are uniform over the interior margin (the inference prior stays
    uniform over the whole box); fluorescence is exponential with mean
    fluor_scale; momenta are Gaussian; background is half-normal.
    """
    rng = np.random.default_rng(seed)
    i, t, d = config.num_sources, config.num_times, config.dim
    margin = interior_margin(config)
    ext = config.extents
    if np.any(2.0 * margin >= ext):
        raise InvariantError(
            f"interior margin {margin:.1f} too large for grid {config.grid_shape}")
    positions = rng.uniform(margin, ext - margin, size=(i, d))
    fluorescence = rng.exponential(scale=config.fluor_scale, size=(i, t))
    chol = np.linalg.cholesky(config.motion_cov)
    momenta = rng.standard_normal(size=(i, t, d)) @ chol.T
    background = abs(rng.normal(0.0, config.background_scale))
    return Catalogue(
        positions=positions,
        fluorescence=fluorescence,
        momenta=momenta,
        background=background,
    )


def simulate_observations(catalogue: Catalogue, config: ModelConfig, seed: int) -> ObservationStack:
    """Independent Poisson draws per voxel and time with mean foreground + background."""
    catalogue.validate(config)
    rng = np.random.default_rng(seed)
    mean = render_intensity_stack(catalogue, config) + catalogue.background
    counts = rng.poisson(mean)
    return ObservationStack(counts=counts)


@dataclass
class BenchmarkRun:
    num_sources: int
    num_times: int
    grid_shape: tuple[int, ...]
    seed: int
    truth_path: str
    obs_path: str
    results_path: str

    def to_dict(self) -> dict:
        return {
            "num_sources": self.num_sources,
            "num_times": self.num_times,
            "grid_shape": list(self.grid_shape),
            "seed": self.seed,
            "truth_path": self.truth_path,
            "obs_path": self.obs_path,
            "results_path": self.results_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkRun":
        return cls(
            num_sources=int(d["num_sources"]),
            num_times=int(d["num_times"]),
            grid_shape=tuple(d["grid_shape"]),
            seed=int(d["seed"]),
            truth_path=d["truth_path"],
            obs_path=d["obs_path"],
            results_path=d["results_path"],
        )


@dataclass
class BenchmarkManifest:
    base_seed: int
    runs: list[BenchmarkRun]

    def __post_init__(self):
        seeds = [r.seed for r in self.runs]
        if len(set(seeds)) != len(seeds):
            raise InvariantError("benchmark run seeds must be unique")

    def save(self, path) -> None:
        from .storage import atomic_write_text

        doc = {"base_seed": self.base_seed, "runs": [r.to_dict() for r in self.runs]}
        atomic_write_text(path, json.dumps(doc, indent=2))

    @classmethod
    def load(cls, path) -> "BenchmarkManifest":
        doc = json.loads(Path(path).read_text())
        return cls(
            base_seed=int(doc["base_seed"]),
            runs=[BenchmarkRun.from_dict(r) for r in doc["runs"]],
        )


def derive_seed(base_seed: int, index: int) -> int:
    """Deterministic per-run seed from the base seed and run index."""
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def build_benchmark(
    I_list,
    T_list,
    replicates: int,
    base_seed: int,
    out_dir,
    grid_shape: tuple[int, ...] = DEFAULT_GRID,
    config_factory=default_config,
) -> BenchmarkManifest:
    """Write truth catalogues and observations for every (I, T, replicate)
    cell and return the manifest that drives the evaluation pipeline."""
    from .storage import write_catalogue, write_tensor

    I_list = list(I_list)
    T_list = list(T_list)
    if not I_list or not T_list or replicates < 1:
        raise InvariantError("benchmark needs nonempty I/T lists and replicates >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    index = 0
    for n_src in I_list:
        for n_time in T_list:
            for rep in range(replicates):
                seed = derive_seed(base_seed, index)
                run_dir = out / f"I{n_src}_T{n_time}_r{rep:03d}"
                run_dir.mkdir(parents=True, exist_ok=True)
                config = config_factory(n_src, n_time, grid_shape)
                truth = sample_catalogue(config, seed)
                obs = simulate_observations(truth, config, derive_seed(seed, 1))
                truth_path = run_dir / "truth.json"
                obs_path = run_dir / "observations.psvt"
                write_catalogue(truth_path, truth, config)
                write_tensor(obs_path, obs.counts.astype(np.uint32), "u32", obs.counts.shape)
                runs.append(BenchmarkRun(
                    num_sources=n_src,
                    num_times=n_time,
                    grid_shape=tuple(grid_shape),
                    seed=seed,
                    truth_path=str(truth_path),
                    obs_path=str(obs_path),
                    results_path=str(run_dir / "results.json"),
                ))
                index += 1
    manifest = BenchmarkManifest(base_seed=base_seed, runs=runs)
    manifest.save(out / "manifest.json")
    return manifest
