"""Command-line driver: simulate -> infer -> evaluate -> summarize, plus a
gradient self-check.  Exit codes: 0 success, 1 validation error, 2 runtime
failure.  All randomness flows from a single --seed."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, simulator, storage
from .forward import rasterize_displacement, render_intensity_stack
from .posterior import PosteriorContext, to_unconstrained
from .sampler import (
    SamplerConfig,
    posterior_mean_catalogue,
    posterior_mean_intensity,
    run_chain,
    summarize_chain,
)
from .simulator import derive_seed
from .types import InvariantError, ModelConfig, ObservationStack

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

GRADCHECK_TOLERANCE = 1e-6

_RUN_CONFIG_SECTIONS = {"model", "sampler", "paths"}


def load_run_config(path) -> dict:
    """Parse a run-config JSON file; unknown top-level keys are rejected."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise InvariantError(f"{path}: run config must be a JSON object")
    extra = set(doc) - _RUN_CONFIG_SECTIONS
    if extra:
        raise InvariantError(f"{path}: unknown run config keys: {sorted(extra)}")
    return doc


def _parse_grid(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise InvariantError(f"bad grid spec {text!r}") from None
    if not shape:
        raise InvariantError("empty grid spec")
    return shape


def _parse_int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",")]


def _model_config_from_args(args, file_section: dict | None) -> ModelConfig:
    base = dict(file_section or {})
    if getattr(args, "grid", None):
        shape = _parse_grid(args.grid)
        base["grid_shape"] = list(shape)
        base["dim"] = len(shape)
    for flag, key in (("I", "num_sources"), ("T", "num_times")):
        v = getattr(args, flag, None)
        if v is not None:
            base[key] = v
    if not base:
        raise InvariantError("no model configuration given (use --config or flags)")
    defaults = simulator.default_config(
        base.get("num_sources", 2), base.get("num_times", 4),
        tuple(base.get("grid_shape", simulator.DEFAULT_GRID)),
    ).to_dict()
    defaults.update(base)
    return ModelConfig.from_dict(defaults)


def _sampler_config_from_args(args, file_section: dict | None, seed: int) -> SamplerConfig:
    base = dict(file_section or {})
    known = {"warmup_iters", "sample_iters", "target_accept", "leapfrog_steps",
             "init_step_size", "mass_adapt_window", "seed"}
    extra = set(base) - known
    if extra:
        raise InvariantError(f"unknown sampler config keys: {sorted(extra)}")
    overrides = {
        "warmup_iters": getattr(args, "warmup", None),
        "sample_iters": getattr(args, "samples", None),
        "target_accept": getattr(args, "target_accept", None),
        "leapfrog_steps": getattr(args, "leapfrog_steps", None),
        "init_step_size": getattr(args, "step_size", None),
    }
    for key, val in overrides.items():
        if val is not None:
            base[key] = val
    base["seed"] = seed
    return SamplerConfig(**base)


def cmd_simulate(args) -> int:
    file_cfg = load_run_config(args.config) if args.config else {}
    grid = _parse_grid(args.grid) if args.grid else tuple(
        (file_cfg.get("model") or {}).get("grid_shape", simulator.DEFAULT_GRID))
    i_list = _parse_int_list(args.I) if args.I else [2]
    t_list = _parse_int_list(args.T) if args.T else [4]
    manifest = simulator.build_benchmark(
        i_list, t_list, args.replicates, args.seed, args.out, grid_shape=grid)
    print(f"wrote {len(manifest.runs)} run(s) under {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    file_cfg = load_run_config(args.config) if args.config else {}
    counts, dtype, shape = storage.read_tensor(args.obs)
    obs = ObservationStack(counts=counts)
    model_section = dict(file_cfg.get("model") or {})
    if args.model:
        doc = json.loads(Path(args.model).read_text())
        model_section = doc["config"] if "config" in doc else doc
    config = _model_config_from_args(args, model_section)
    obs.validate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chains = []
    for c in range(args.chains):
        sconfig = _sampler_config_from_args(
            args, file_cfg.get("sampler"), seed=derive_seed(args.seed, c))
        chain = run_chain(obs, config, sconfig, progress=not args.quiet)
        storage.write_chain(out / f"chain_{c:02d}", chain)
        chains.append(chain)
    mean_cat = posterior_mean_catalogue(chains)
    storage.write_catalogue(out / "posterior_mean.json", mean_cat, config)
    intensity = posterior_mean_intensity(chains, thin=args.thin)
    storage.write_tensor(out / "intensity_mean.psvt", intensity, "f64", intensity.shape)
    pts = None
    vecs = []
    for t in range(config.num_times):
        disp = rasterize_displacement(mean_cat, t, config, stride=args.stride)
        pts = disp.sample_points
        vecs.append(disp.vectors)
    storage.write_tensor(out / "displacement_points.psvt", pts, "f64", pts.shape)
    vec_arr = np.stack(vecs)
    storage.write_tensor(out / "displacement_vectors.psvt", vec_arr, "f64", vec_arr.shape)
    summary = summarize_chain(chains)
    doc = {
        "mean_accept": summary.mean_accept,
        "min_ess": float(np.nanmin(summary.ess)),
        "label_switches": summary.label_switches,
        "divergences": int(sum(c.divergences for c in chains)),
        "num_chains": len(chains),
        "draws_per_chain": summary.draws_per_chain,
    }
    storage.atomic_write_text(out / "summary.json", json.dumps(doc, indent=2))
    print(f"inference complete: mean acceptance {summary.mean_accept:.3f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    truth, config = storage.read_catalogue(args.truth)
    est, est_config = storage.read_catalogue(args.estimate)
    counts, _, _ = storage.read_tensor(args.obs)
    obs = ObservationStack(counts=counts)
    obs.validate(config)
    truth_intensity = render_intensity_stack(truth, config)
    est_intensity = render_intensity_stack(est, est_config)
    report = evaluation.simulation_metrics(
        truth, est, est_intensity, truth_intensity, obs, config)
    recon = evaluation.reconstruction_metrics(est_intensity, est.background, obs)
    doc = report.to_dict()
    doc["rmse"] = recon.rmse
    doc["temporal_consistency"] = recon.temporal_consistency
    from .types import IntensityField

    if config.num_times >= 2:
        threshold = evaluation.default_peak_threshold(est.background)
        fields = [IntensityField(values=est_intensity[t] + est.background, time_index=t)
                  for t in range(config.num_times)]
        doc["peak_count_std"] = evaluation.peak_stability(fields, 2, threshold)
    text = json.dumps(doc, indent=2)
    if args.out:
        storage.atomic_write_text(args.out, text)
    print(text)
    return EXIT_OK


def random_interior_state(rng, dim: int, grid_shape: tuple[int, ...],
                          max_sources: int = 3, max_times: int = 3):
    """Random interior (config, observation, unconstrained state) triple for
    gradient verification."""
    from .simulator import simulate_observations
    from .types import Catalogue

    n_src = int(rng.integers(1, max_sources + 1))
    n_time = int(rng.integers(1, max_times + 1))
    config = ModelConfig(
        dim=dim,
        grid_shape=grid_shape,
        num_sources=n_src,
        num_times=n_time,
        psf_cov=np.eye(dim) * float(rng.uniform(1.5, 4.0)),
        motion_cov=np.eye(dim) * float(rng.uniform(0.5, 2.0)),
        fluor_scale=50.0,
        background_scale=2.0,
        kernel_bandwidth=float(rng.uniform(3.0, 8.0)),
    )
    ext = config.extents
    truth = Catalogue(
        positions=rng.uniform(0.2 * ext, 0.8 * ext, size=(n_src, dim)),
        fluorescence=rng.exponential(config.fluor_scale, size=(n_src, n_time)) + 1.0,
        momenta=rng.normal(0.0, 1.0, size=(n_src, n_time, dim)),
        background=float(rng.uniform(0.5, 3.0)),
    )
    obs = simulate_observations(truth, config, int(rng.integers(2**32)))
    vec = to_unconstrained(truth, config) + 0.1 * rng.standard_normal(
        config.num_parameters)
    return config, obs, vec


def max_gradient_error(rng, dim: int, grid_shape: tuple[int, ...], states: int) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    worst = 0.0
    for _ in range(states):
        config, obs, vec = random_interior_state(rng, dim, grid_shape)
        ctx = PosteriorContext(obs, config)
        analytic = ctx.gradient(vec)
        numeric = ctx.finite_diff_gradient(vec, h=1e-5)
        rel = np.max(np.abs(analytic - numeric)) / (np.max(np.abs(analytic)) + 1e-12)
        worst = max(worst, float(rel))
    return worst


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    grid = (16, 16) if args.dim == 2 else (12, 12, 12)
    worst = max_gradient_error(rng, args.dim, grid, args.states)
    print(f"gradcheck: max relative error {worst:.3e} over {args.states} states "
          f"(dim={args.dim})")
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_RUNTIME


def _format_cell(values: np.ndarray) -> str:
    med, q25, q75 = (np.median(values), np.percentile(values, 25),
                     np.percentile(values, 75))
    return f"{med:.2f} [{q25:.2f}, {q75:.2f}]"


def cmd_summarize(args) -> int:
    manifest = simulator.BenchmarkManifest.load(args.manifest)
    by_cell: dict[tuple[int, int], list[dict]] = {}
    for run in manifest.runs:
        path = Path(run.results_path)
        if not path.exists():
            continue
        report = json.loads(path.read_text())
        by_cell.setdefault((run.num_sources, run.num_times), []).append(report)
    if not by_cell:
        print("no results found in manifest", file=sys.stderr)
        return EXIT_RUNTIME
    metrics = ["corr", "fluor_abs_err", "template_err", "deform_err",
               "momenta_err", "per_voxel_loglik"]
    header = "I\tT\t" + "\t".join(metrics)
    lines = [header]
    for (n_src, n_time) in sorted(by_cell):
        reports = by_cell[(n_src, n_time)]
        cells = []
        for metric in metrics:
            vals = np.array([r[metric] for r in reports if r.get(metric) is not None])
            cells.append(_format_cell(vals) if vals.size else "-")
        lines.append(f"{n_src}\t{n_time}\t" + "\t".join(cells))
    text = "\n".join(lines)
    print(text)
    if args.out:
        storage.atomic_write_text(args.out, text + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointcat",
        description="Probabilistic cataloguing of moving point sources from "
                    "photon-count image stacks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate benchmark scenes from the priors")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--I", help="comma-separated source counts (default 2)")
    p.add_argument("--T", help="comma-separated time counts (default 4)")
    p.add_argument("--grid", help="comma-separated grid shape, e.g. 64,64")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--config", help="run-config JSON file")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="run HMC on an observation stack")
    p.add_argument("--obs", required=True, help="observation tensor file")
    p.add_argument("--model", help="model-config JSON (or catalogue file with config block)")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--warmup", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--target-accept", type=float, dest="target_accept")
    p.add_argument("--leapfrog-steps", type=int, dest="leapfrog_steps")
    p.add_argument("--step-size", type=float, dest="step_size")
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--I", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--grid")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score an estimate against truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--estimate", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="verify the analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=2, choices=(2, 3))
    p.add_argument("--states", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("summarize", help="aggregate benchmark results")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_summarize)

    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (InvariantError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, storage.StorageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
