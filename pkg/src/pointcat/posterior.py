"""Unconstrained reparameterization, potential (negative log posterior up to
constants), and its analytic gradient, plus a finite-difference oracle.

Flat parameter layout, in unconstrained space:

    [positions (I*dim) | fluorescence (I*T) | momenta (I*T*dim) | background]

Positions use a per-axis logistic transform onto (0, L); fluorescence and
background use log; momenta are unchanged.  The potential includes the exact
log-Jacobian of the transform so that sampling in unconstrained space targets
the constrained posterior.  Constant terms (log N!, prior normalizers) are
dropped consistently throughout this module.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from .forward import GaussianPsf, kernel_grad1_matrix, kernel_matrix
from .types import Catalogue, InvariantError, ModelConfig, ObservationStack, voxel_centers


class NonInteriorError(ValueError):
    """A catalogue touching a constraint boundary cannot be mapped to
    unconstrained coordinates; the caller must jitter first."""


class ParameterLayout:
    """Index bookkeeping between flat vectors and catalogue blocks."""

    def __init__(self, config: ModelConfig):
        i, t, d = config.num_sources, config.num_times, config.dim
        self.num_sources = i
        self.num_times = t
        self.dim = d
        n_pos = i * d
        n_fluor = i * t
        n_mom = i * t * d
        self.positions = slice(0, n_pos)
        self.fluorescence = slice(n_pos, n_pos + n_fluor)
        self.momenta = slice(n_pos + n_fluor, n_pos + n_fluor + n_mom)
        self.background = n_pos + n_fluor + n_mom
        self.size = n_pos + n_fluor + n_mom + 1

    def split(self, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise InvariantError(f"parameter vector has shape {vec.shape}, expected ({self.size},)")
        i, t, d = self.num_sources, self.num_times, self.dim
        return (
            vec[self.positions].reshape(i, d),
            vec[self.fluorescence].reshape(i, t),
            vec[self.momenta].reshape(i, t, d),
            float(vec[self.background]),
        )

    def join(self, pos: np.ndarray, fluor: np.ndarray, mom: np.ndarray, bg: float) -> np.ndarray:
        return np.concatenate([
            np.asarray(pos, dtype=float).ravel(),
            np.asarray(fluor, dtype=float).ravel(),
            np.asarray(mom, dtype=float).ravel(),
            [float(bg)],
        ])

    def names(self) -> list[str]:
        out = []
        axes = "xyz"
        for i in range(self.num_sources):
            for a in range(self.dim):
                out.append(f"pos[{i},{axes[a]}]")
        for i in range(self.num_sources):
            for t in range(self.num_times):
                out.append(f"fluor[{i},{t}]")
        for i in range(self.num_sources):
            for t in range(self.num_times):
                for a in range(self.dim):
                    out.append(f"mom[{i},{t},{axes[a]}]")
        out.append("background")
        return out


def to_unconstrained(catalogue: Catalogue, config: ModelConfig) -> np.ndarray:
    """Map a strictly interior catalogue to unconstrained coordinates."""
    catalogue.validate(config)
    layout = ParameterLayout(config)
    ext = config.extents
    x = catalogue.positions
    f = catalogue.fluorescence
    if np.any(x <= 0) or np.any(x >= ext):
        raise NonInteriorError("positions must be strictly inside the domain box")
    if np.any(f <= 0) or catalogue.background <= 0:
        raise NonInteriorError("fluorescence and background must be strictly positive")
    s_pos = np.log(x / (ext - x))
    return layout.join(s_pos, np.log(f), catalogue.momenta, math.log(catalogue.background))


def to_constrained(vec: np.ndarray, config: ModelConfig) -> Catalogue:
    """Inverse of to_unconstrained; total on finite vectors."""
    layout = ParameterLayout(config)
    s_pos, s_f, mom, s_b = layout.split(vec)
    ext = config.extents
    with np.errstate(over="ignore", under="ignore"):
        x = ext / (1.0 + np.exp(-s_pos))
        f = np.exp(s_f)
        bg = math.exp(s_b) if s_b < 700 else math.inf
    return Catalogue(positions=x, fluorescence=f, momenta=mom.copy(), background=bg)


class PosteriorContext:
    """Immutable bundle of observations, config, and cached tables needed to
    evaluate the potential and its gradient."""

    def __init__(self, observations: ObservationStack, config: ModelConfig):
        observations.validate(config)
        self.observations = observations
        self.config = config
        self.layout = ParameterLayout(config)
        self.grid = voxel_centers(config.grid_shape)              # (V, dim)
        self.counts = observations.counts.reshape(config.num_times, -1).astype(float)
        self.psf = GaussianPsf(config.psf_cov)
        self.motion_inv = np.linalg.inv(config.motion_cov)
        # full Poisson pmf needs log N!; cached for metric reporting
        self.log_factorial = gammaln(self.counts + 1.0)

    # -- internal -----------------------------------------------------------

    def _constrain(self, vec):
        s_pos, s_f, mom, s_b = self.layout.split(vec)
        ext = self.config.extents
        with np.errstate(over="ignore", under="ignore"):
            sig = 1.0 / (1.0 + np.exp(-s_pos))
            x = ext * sig
            f = np.exp(s_f)
            lam0 = math.exp(min(s_b, 700.0))
        return x, f, mom, lam0, s_f, s_b

    def _warped(self, x, mom, t):
        if x.shape[0] == 0:
            return x
        k = kernel_matrix(x, x, self.config.kernel_bandwidth)
        return x + k @ mom[:, t, :]

    # -- public -------------------------------------------------------------

    def potential(self, vec: np.ndarray) -> float:
        """U = -(log-likelihood + log-priors + log-Jacobian), up to constants.

        Returns +inf as a rejection sentinel for degenerate or overflowed
        states (e.g. a zero rate at a voxel with positive counts).
        """
        cfg = self.config
        x, f, mom, lam0, s_f, s_b = self._constrain(vec)
        if not (np.all(np.isfinite(f)) and math.isfinite(lam0)):
            return math.inf
        kmat = None
        if x.shape[0] > 0:
            kmat = kernel_matrix(x, x, cfg.kernel_bandwidth)
        loglik = 0.0
        for t in range(cfg.num_times):
            if x.shape[0] > 0:
                warped = x + kmat @ mom[:, t, :]
                dens = self.psf.density(self.grid[None, :, :] - warped[:, None, :])
                lam = f[:, t] @ dens
            else:
                lam = np.zeros(self.grid.shape[0])
            mu = lam + lam0
            n = self.counts[t]
            if np.any((mu <= 0.0) & (n > 0.0)):
                return math.inf
            with np.errstate(divide="ignore", invalid="ignore"):
                term = np.where(n > 0.0, n * np.log(mu), 0.0)
            loglik += float(term.sum() - mu.sum())
        logprior = (
            -float(f.sum()) / cfg.fluor_scale
            - 0.5 * float(np.einsum("itd,de,ite->", mom, self.motion_inv, mom))
            - lam0**2 / (2.0 * cfg.background_scale**2)
        )
        ext = cfg.extents
        with np.errstate(divide="ignore"):
            logjac_pos = float(np.log(x).sum() + np.log(ext - x).sum()) \
                - x.shape[0] * float(np.log(ext).sum())
        logjac = logjac_pos + float(s_f.sum()) + s_b
        u = -(loglik + logprior + logjac)
        return u if math.isfinite(u) else math.inf

    def gradient(self, vec: np.ndarray) -> np.ndarray:
        """Analytic gradient of `potential`; NaNs signal a divergent state."""
        cfg = self.config
        lay = self.layout
        nan = np.full(lay.size, np.nan)
        x, f, mom, lam0, s_f, s_b = self._constrain(vec)
        if not (np.all(np.isfinite(f)) and math.isfinite(lam0)):
            return nan
        num_i = x.shape[0]
        if num_i > 0:
            kmat = kernel_matrix(x, x, cfg.kernel_bandwidth)
            d1 = kernel_grad1_matrix(x, x, cfg.kernel_bandwidth)  # (I, I, d)
        du_x = np.zeros_like(x)
        du_f = np.zeros_like(f)
        du_p = np.zeros_like(mom)
        du_b = 0.0
        for t in range(cfg.num_times):
            if num_i > 0:
                warped = x + kmat @ mom[:, t, :]
                diff = self.grid[None, :, :] - warped[:, None, :]   # (I, V, d)
                a = diff @ self.psf.inv                             # (I, V, d)
                quad = np.einsum("ivd,ivd->iv", a, diff)
                dens = np.exp(self.psf.log_norm - 0.5 * quad)       # (I, V)
                lam = f[:, t] @ dens
            else:
                lam = np.zeros(self.grid.shape[0])
            mu = lam + lam0
            n = self.counts[t]
            if np.any((mu <= 0.0) & (n > 0.0)):
                return nan
            resid = np.divide(n, mu, out=np.zeros_like(mu), where=mu > 0.0) - 1.0
            du_b -= float(resid.sum())
            if num_i == 0:
                continue
            du_f[:, t] = -(dens @ resid)
            # sensitivity of the log-likelihood to each warped position
            w = dens * resid[None, :]
            g = f[:, t, None] * np.einsum("iv,ivd->id", w, a)       # (I, d)
            du_p[:, t, :] = -(kmat @ g)
            # position gradient: direct PSF term plus kernel coupling through
            # both kernel arguments (the full Jacobian of the warp)
            p2 = g @ mom[:, t, :].T                                 # p2[i,j] = g_i . p_j
            coupling = np.einsum("ijd,ij->id", d1, p2 + p2.T)
            du_x -= g + coupling
        du_f += 1.0 / cfg.fluor_scale
        du_p += np.einsum("de,ite->itd", self.motion_inv, mom)
        du_b += lam0 / cfg.background_scale**2
        # chain rule through the reparameterization, plus the Jacobian's own gradient
        ext = cfg.extents
        dx_ds = x * (ext - x) / ext
        g_pos = du_x * dx_ds - (ext - 2.0 * x) / ext
        g_f = du_f * f - 1.0
        g_b = du_b * lam0 - 1.0
        out = lay.join(g_pos, g_f, du_p, g_b)
        return out if np.all(np.isfinite(out)) else nan

    def finite_diff_gradient(self, vec: np.ndarray, h: float = 1e-5) -> np.ndarray:
        """Central-difference gradient of `potential` (verification oracle)."""
        if not h > 0:
            raise InvariantError(f"finite-difference step must be > 0, got {h}")
        vec = np.asarray(vec, dtype=float)
        out = np.empty_like(vec)
        for j in range(vec.size):
            up = vec.copy()
            dn = vec.copy()
            up[j] += h
            dn[j] -= h
            out[j] = (self.potential(up) - self.potential(dn)) / (2.0 * h)
        return out


def potential(vec: np.ndarray, ctx: PosteriorContext) -> float:
    return ctx.potential(vec)


def grad_potential(vec: np.ndarray, ctx: PosteriorContext) -> np.ndarray:
    return ctx.gradient(vec)


def finite_diff_gradient(vec: np.ndarray, ctx: PosteriorContext, h: float = 1e-5) -> np.ndarray:
    return ctx.finite_diff_gradient(vec, h)
