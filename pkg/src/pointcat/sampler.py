"""Fixed-trajectory Hamiltonian Monte Carlo with leapfrog integration,
dual-averaging step-size adaptation, and diagonal mass-matrix adaptation."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .diagnostics import effective_sample_size, split_rhat
from .posterior import ParameterLayout, PosteriorContext, to_constrained, to_unconstrained
from .types import Catalogue, InvariantError, ModelConfig, ObservationStack

DIVERGENCE_THRESHOLD = 1000.0  # |dH| beyond this marks a divergent trajectory


@dataclass(frozen=True)
class SamplerConfig:
    warmup_iters: int = 1000
    sample_iters: int = 1000
    target_accept: float = 0.9
    leapfrog_steps: int = 16
    init_step_size: float = 0.05
    mass_adapt_window: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.warmup_iters < 1 or self.sample_iters < 1:
            raise InvariantError("iteration counts must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise InvariantError(f"target_accept must be in (0,1), got {self.target_accept}")
        if self.leapfrog_steps < 1:
            raise InvariantError("leapfrog_steps must be >= 1")
        if not self.init_step_size > 0:
            raise InvariantError("init_step_size must be > 0")


@dataclass
class Chain:
    """Ordered posterior draws with per-draw energy and adaptation traces."""

    config: ModelConfig
    draws: list[Catalogue]
    energies: np.ndarray          # H at each recorded iteration
    accept_flags: np.ndarray
    accept_probs: np.ndarray
    step_size_trace: np.ndarray   # per sampling iteration; constant after warmup
    mass_diag: np.ndarray
    seed: int
    divergences: int = 0
    warmup_accept_probs: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __len__(self) -> int:
        return len(self.draws)

    def draws_matrix(self) -> np.ndarray:
        """Draws flattened to (num_draws, m) in constrained space."""
        lay = ParameterLayout(self.config)
        return np.stack([
            lay.join(c.positions, c.fluorescence, c.momenta, c.background)
            for c in self.draws
        ])


@dataclass
class ChainSummary:
    names: list[str]
    mean: np.ndarray
    sd: np.ndarray
    quantiles: np.ndarray         # (5, m) at 2.5/25/50/75/97.5%
    ess: np.ndarray
    rhat: np.ndarray | None       # None for a single chain
    mean_accept: float
    num_chains: int
    draws_per_chain: int
    label_switches: int = 0

    QUANTILE_LEVELS = (0.025, 0.25, 0.5, 0.75, 0.975)


def leapfrog(q, v, step_size, num_steps, mass_diag, target):
    """Leapfrog integration of Hamilton's equations with a diagonal mass.

    `target` exposes potential(q) -> float and gradient(q) -> ndarray.
    Uses the fused scheme with num_steps + 1 gradient evaluations; returns
    (q, v, grad_evals, ok) where ok=False flags a non-finite gradient
    (treated as a divergence upstream).
    """
    q = np.asarray(q, dtype=float).copy()
    v = np.asarray(v, dtype=float).copy()
    inv_mass = 1.0 / np.asarray(mass_diag, dtype=float)
    grad = target.gradient(q)
    evals = 1
    if not np.all(np.isfinite(grad)):
        return q, v, evals, False
    v -= 0.5 * step_size * grad
    for step in range(num_steps):
        q += step_size * inv_mass * v
        grad = target.gradient(q)
        evals += 1
        if not np.all(np.isfinite(grad)):
            return q, v, evals, False
        v -= (step_size if step < num_steps - 1 else 0.5 * step_size) * grad
    return q, v, evals, True


def hmc_step(q, step_size, num_steps, mass_diag, target, rng):
    """One HMC transition: sample momentum, integrate, Metropolis-correct.

    Returns (q', accepted, alpha, energy, divergent); divergent trajectories
    get alpha = 0 and are rejected.
    """
    mass_diag = np.asarray(mass_diag, dtype=float)
    v = rng.standard_normal(q.size) * np.sqrt(mass_diag)
    u0 = target.potential(q)
    h0 = u0 + 0.5 * float(np.sum(v * v / mass_diag))
    q_new, v_new, _, ok = leapfrog(q, v, step_size, num_steps, mass_diag, target)
    if ok:
        u1 = target.potential(q_new)
        h1 = u1 + 0.5 * float(np.sum(v_new * v_new / mass_diag))
    else:
        h1 = math.inf
    dh = h1 - h0
    divergent = (not math.isfinite(dh)) or abs(dh) > DIVERGENCE_THRESHOLD
    if divergent:
        return q, False, 0.0, h0, True
    alpha = min(1.0, math.exp(-dh)) if dh > 0 else 1.0
    if rng.uniform() < alpha:
        return q_new, True, alpha, h1, False
    return q, False, alpha, h0, False


class DualAveraging:
    """Dual-averaging step-size adaptation toward a target acceptance rate.

    Standard schedule: gamma=0.05, t0=10, kappa=0.75, mu=log(10 * eps0).
    """

    def __init__(self, init_step_size, target_accept,
                 gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * init_step_size)
        self.target = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.count = 0
        self.h_bar = 0.0
        self.log_eps = math.log(init_step_size)
        self.log_eps_bar = math.log(init_step_size)

    def update(self, alpha: float) -> float:
        """Consume one acceptance probability; returns the next step size."""
        self.count += 1
        m = self.count
        frac = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - alpha)
        self.log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        w = m ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def step_size(self) -> float:
        return math.exp(self.log_eps)

    @property
    def averaged_step_size(self) -> float:
        return math.exp(self.log_eps_bar)


def dual_averaging_update(state: DualAveraging, alpha: float) -> DualAveraging:
    """Functional wrapper over DualAveraging.update."""
    state.update(alpha)
    return state


def auto_init(obs: ObservationStack, config: ModelConfig, rng) -> Catalogue:
    """Data-driven starting point.

    Sources are placed by greedy matched-filter peak subtraction on the
    time-averaged PSF-smoothed counts; once the residual drops to the noise
    floor, remaining sources split the brightest already-placed blob so that
    merged nearby sources can be separated locally by the sampler.  Momenta
    start at zero, the background at the median count.
    """
    from .types import voxel_centers

    i, t, d = config.num_sources, config.num_times, config.dim
    lam0 = max(float(np.median(obs.counts)), 0.5)
    if i == 0:
        return Catalogue(
            positions=np.zeros((0, d)),
            fluorescence=np.zeros((0, t)),
            momenta=np.zeros((0, t, d)),
            background=lam0,
        )
    sig = np.sqrt(np.diag(config.psf_cov))
    smoothed = gaussian_filter(obs.counts.mean(axis=0), sigma=sig, mode="nearest")
    floor = float(np.median(smoothed))
    noise = 1.4826 * float(np.median(np.abs(smoothed - floor)))
    # the time-averaged blob of one source: PSF, matched-filter smoothing,
    # and motion smear all broaden it
    blob_cov = 2.0 * config.psf_cov + config.motion_cov
    blob_inv = np.linalg.inv(blob_cov)
    grid = voxel_centers(config.grid_shape)
    residual = smoothed.ravel().copy()
    split_scale = math.sqrt(float(np.linalg.eigvalsh(config.psf_cov).max()))
    placed: list[np.ndarray] = []
    amps: list[float] = []
    ext = config.extents
    # boundary voxels are inflated by the edge handling of the smoother, so
    # candidate peaks are restricted to the interior
    margin = max(2.0, float(sig.max()))
    interior = np.all((grid >= margin) & (grid <= ext - margin), axis=1)
    if not interior.any():
        interior = np.ones(len(grid), dtype=bool)
    for _ in range(i):
        idx = int(np.argmax(np.where(interior, residual, -np.inf)))
        amp = float(residual[idx]) - floor
        if amp > 3.0 * noise + 1e-9:
            center = grid[idx].copy()
            diff = grid - center
            shape = np.exp(-0.5 * np.einsum("vd,de,ve->v", diff, blob_inv, diff))
            residual = residual - amp * shape
            placed.append(center)
            amps.append(amp)
        elif placed:
            # split the brightest blob: aim at the residual maximum near the
            # host, which points toward an unexplained shoulder if one exists
            host = placed[int(np.argmax(amps))]
            near = interior & (np.linalg.norm(grid - host, axis=1) <= 2.0 * split_scale)
            j = int(np.argmax(np.where(near, residual, -np.inf)))
            offset = grid[j] - host
            norm = float(np.linalg.norm(offset))
            if norm < 1e-6:
                offset = rng.standard_normal(d)
                norm = float(np.linalg.norm(offset)) + 1e-12
            placed.append(host + split_scale * offset / norm)
            amps.append(0.0)
        else:
            placed.append(rng.uniform(0.2 * ext, 0.8 * ext))
            amps.append(0.0)
    positions = np.stack(placed) + rng.uniform(-0.5, 0.5, size=(i, d))
    positions = np.clip(positions, 0.5, ext - 0.5)
    # amplitude from the smoothed image: smoothing with the PSF width roughly
    # doubles the covariance of an already-blurred source
    eff_cov = config.psf_cov + np.diag(sig**2)
    peak_to_flux = (2.0 * math.pi) ** (d / 2.0) * math.sqrt(np.linalg.det(eff_cov))
    fluor = np.empty((i, t))
    for ti in range(t):
        sm_t = gaussian_filter(obs.counts[ti].astype(float), sigma=sig, mode="nearest")
        for si in range(i):
            idx = tuple(np.clip(np.rint(positions[si]).astype(int), 0,
                                np.array(config.grid_shape) - 1))
            fluor[si, ti] = max((sm_t[idx] - lam0) * peak_to_flux, 1.0)
    return Catalogue(
        positions=positions,
        fluorescence=fluor,
        momenta=np.zeros((i, t, d)),
        background=lam0,
    )


def run_chain(
    obs: ObservationStack,
    config: ModelConfig,
    sconfig: SamplerConfig,
    init: Catalogue | str = "auto",
    progress: bool = False,
) -> Chain:
    """Warm-up with step-size and mass adaptation, then record draws.

    Adaptation is frozen after warm-up; the whole chain is a pure function of
    (obs, configs, init, seed).
    """
    ctx = PosteriorContext(obs, config)
    rng = np.random.default_rng(sconfig.seed)
    if isinstance(init, str):
        if init != "auto":
            raise InvariantError(f"unknown init policy {init!r}")
        start = auto_init(obs, config, rng)
    else:
        init.validate(config)
        start = init
    q = to_unconstrained(start, config)
    m = q.size
    mass_diag = np.ones(m)
    da = DualAveraging(sconfig.init_step_size, sconfig.target_accept)
    eps = sconfig.init_step_size
    steps = sconfig.leapfrog_steps

    warmup = sconfig.warmup_iters
    window = max(10, min(sconfig.mass_adapt_window, warmup // 4))
    adapt_points = {p for p in (warmup // 2, (3 * warmup) // 4) if p > window}
    history: list[np.ndarray] = []
    warm_alphas = np.empty(warmup)
    divergences = 0

    for it in range(warmup):
        q, accepted, alpha, _, div = hmc_step(q, eps, steps, mass_diag, ctx, rng)
        divergences += int(div)
        eps = da.update(alpha)
        warm_alphas[it] = alpha
        history.append(q)
        if len(history) > window:
            history.pop(0)
        if (it + 1) in adapt_points:
            block = np.stack(history)
            var = block.var(axis=0)
            n = block.shape[0]
            var_reg = n / (n + 5.0) * var + 5.0 / (n + 5.0)
            mass_diag = 1.0 / var_reg
        if progress and (it + 1) % 100 == 0:
            print(f"warmup {it + 1}/{warmup} eps={eps:.3e}", file=sys.stderr)

    eps = da.averaged_step_size  # frozen for sampling
    draws: list[Catalogue] = []
    energies = np.empty(sconfig.sample_iters)
    accept_flags = np.empty(sconfig.sample_iters, dtype=bool)
    accept_probs = np.empty(sconfig.sample_iters)
    step_trace = np.full(sconfig.sample_iters, eps)

    for it in range(sconfig.sample_iters):
        q, accepted, alpha, energy, div = hmc_step(q, eps, steps, mass_diag, ctx, rng)
        divergences += int(div)
        draws.append(to_constrained(q, config))
        energies[it] = energy
        accept_flags[it] = accepted
        accept_probs[it] = alpha
        if progress and (it + 1) % 100 == 0:
            print(f"sample {it + 1}/{sconfig.sample_iters} "
                  f"accept={accept_probs[: it + 1].mean():.3f}", file=sys.stderr)

    return Chain(
        config=config,
        draws=draws,
        energies=energies,
        accept_flags=accept_flags,
        accept_probs=accept_probs,
        step_size_trace=step_trace,
        mass_diag=mass_diag,
        seed=sconfig.seed,
        divergences=divergences,
        warmup_accept_probs=warm_alphas,
    )


def _match_to_reference(ref: np.ndarray, pos: np.ndarray) -> tuple[int, ...]:
    from scipy.optimize import linear_sum_assignment

    cost = np.linalg.norm(ref[:, None, :] - pos[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return tuple(cols[np.argsort(rows)])


def count_label_switches(chain: Chain, stride: int = 10) -> int:
    """Number of times the draw-to-initial source assignment changes along the
    chain (checked every `stride` draws); label switching diagnostic."""
    if chain.config.num_sources < 2 or len(chain.draws) < 2:
        return 0
    ref = chain.draws[0].positions
    prev = None
    switches = 0
    for idx in range(0, len(chain.draws), stride):
        perm = _match_to_reference(ref, chain.draws[idx].positions)
        if prev is not None and perm != prev:
            switches += 1
        prev = perm
    return switches


def posterior_mean_catalogue(chains: Chain | list[Chain]) -> Catalogue:
    """Pointwise posterior mean of all catalogue blocks across chains."""
    if isinstance(chains, Chain):
        chains = [chains]
    draws = [c for chain in chains for c in chain.draws]
    if not draws:
        raise InvariantError("no draws to average")
    return Catalogue(
        positions=np.mean([c.positions for c in draws], axis=0),
        fluorescence=np.mean([c.fluorescence for c in draws], axis=0),
        momenta=np.mean([c.momenta for c in draws], axis=0),
        background=float(np.mean([c.background for c in draws])),
    )


def posterior_mean_intensity(chains: Chain | list[Chain], thin: int = 1) -> np.ndarray:
    """Posterior mean foreground intensity stack (T, *grid), averaging the
    rendered intensity over (optionally thinned) draws."""
    from .forward import render_intensity_stack

    if isinstance(chains, Chain):
        chains = [chains]
    config = chains[0].config
    total = np.zeros((config.num_times,) + config.grid_shape)
    count = 0
    for chain in chains:
        for c in chain.draws[::max(1, int(thin))]:
            total += render_intensity_stack(c, config)
            count += 1
    if count == 0:
        raise InvariantError("no draws to average")
    return total / count


def summarize_chain(chains: Chain | list[Chain]) -> ChainSummary:
    """Posterior summary over one or more equal-length chains."""
    if isinstance(chains, Chain):
        chains = [chains]
    if not chains:
        raise InvariantError("need at least one chain")
    n = len(chains[0])
    if n == 0:
        raise InvariantError("cannot summarize an empty chain")
    if any(len(c) != n for c in chains):
        raise InvariantError("all chains must have equal length")
    lay = ParameterLayout(chains[0].config)
    stacked = np.stack([c.draws_matrix() for c in chains])  # (C, n, m)
    flat = stacked.reshape(-1, lay.size)
    mean = flat.mean(axis=0)
    sd = flat.std(axis=0, ddof=1) if flat.shape[0] > 1 else np.zeros(lay.size)
    quantiles = np.quantile(flat, ChainSummary.QUANTILE_LEVELS, axis=0)
    ess = np.array([effective_sample_size(stacked[:, :, j]) for j in range(lay.size)])
    if len(chains) >= 2:
        rhat = np.array([split_rhat(stacked[:, :, j]) for j in range(lay.size)])
    else:
        rhat = None
    mean_accept = float(np.mean(np.concatenate([c.accept_probs for c in chains])))
    switches = sum(count_label_switches(c) for c in chains)
    return ChainSummary(
        names=lay.names(),
        mean=mean,
        sd=sd,
        quantiles=quantiles,
        ess=ess,
        rhat=rhat,
        mean_accept=mean_accept,
        num_chains=len(chains),
        draws_per_chain=n,
        label_switches=switches,
    )
