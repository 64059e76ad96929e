"""Deterministic forward model: kernel displacement fields, point warping,
Gaussian PSF, and intensity rendering."""

from __future__ import annotations

import numpy as np

from .types import (
    Catalogue,
    DisplacementField,
    IntensityField,
    InvariantError,
    ModelConfig,
    voxel_centers,
)


def kernel_eval(x: np.ndarray, y: np.ndarray, bandwidth: float) -> tuple[float, np.ndarray]:
    """Isotropic Gaussian scalar kernel k(x, y) = exp(-|x-y|^2 / (2 b^2)).

    Returns (value, grad1) where grad1 is the gradient with respect to the
    first argument: -(x - y) / b^2 * value.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvariantError("kernel_eval: non-finite input point")
    if not (np.isfinite(bandwidth) and bandwidth > 0):
        raise InvariantError(f"kernel bandwidth must be > 0, got {bandwidth}")
    diff = x - y
    value = float(np.exp(-0.5 * np.dot(diff, diff) / bandwidth**2))
    grad1 = -diff / bandwidth**2 * value
    return value, grad1


def kernel_matrix(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    """Pairwise kernel values between point sets a (n, d) and b (m, d)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    diff = a[:, None, :] - b[None, :, :]
    sq = np.einsum("nmd,nmd->nm", diff, diff)
    return np.exp(-0.5 * sq / bandwidth**2)


def kernel_grad1_matrix(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    """Pairwise first-argument kernel gradients, shape (n, m, d)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    diff = a[:, None, :] - b[None, :, :]
    k = np.exp(-0.5 * np.einsum("nmd,nmd->nm", diff, diff) / bandwidth**2)
    return -diff / bandwidth**2 * k[:, :, None]


class GaussianPsf:
    """Gaussian point spread function with a fixed covariance.

    Caches the inverse covariance and normalization; rejects non-SPD
    covariances at construction (Cholesky failure).
    """

    def __init__(self, cov: np.ndarray):
        cov = np.asarray(cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise InvariantError(f"PSF covariance must be square, got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-12):
            raise InvariantError("PSF covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise InvariantError("PSF covariance is not positive definite") from None
        self.cov = cov
        self.dim = cov.shape[0]
        self.inv = np.linalg.inv(cov)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        self.log_norm = -0.5 * self.dim * np.log(2.0 * np.pi) - 0.5 * logdet

    def density(self, r: np.ndarray) -> np.ndarray:
        """Density at offsets r, shape (..., dim) -> (...)."""
        r = np.asarray(r, dtype=float)
        quad = np.einsum("...d,de,...e->...", r, self.inv, r)
        return np.exp(self.log_norm - 0.5 * quad)

    def density_and_grad(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Density and its gradient with respect to r."""
        r = np.asarray(r, dtype=float)
        w = r @ self.inv
        quad = np.einsum("...d,...d->...", w, r)
        dens = np.exp(self.log_norm - 0.5 * quad)
        return dens, -w * dens[..., None]


def psf_eval(r: np.ndarray, psf_cov: np.ndarray) -> tuple[float, np.ndarray]:
    """Gaussian PSF density and gradient at a single offset r."""
    psf = GaussianPsf(psf_cov)
    dens, grad = psf.density_and_grad(np.asarray(r, dtype=float))
    return float(dens), grad


def _check_time(t: int, config: ModelConfig) -> int:
    t = int(t)
    if not 0 <= t < config.num_times:
        raise InvariantError(f"time index {t} out of range [0, {config.num_times})")
    return t


def displacement_at(x: np.ndarray, catalogue: Catalogue, t: int, config: ModelConfig) -> np.ndarray:
    """Kernel displacement field u_t(x) = sum_i k(x, X_i) P_{i,t}.

    Accepts a single point (dim,) or a batch (n, dim); linear in the momenta.
    """
    t = _check_time(t, config)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if catalogue.positions.shape[0] == 0:
        out = np.zeros_like(pts)
    else:
        k = kernel_matrix(pts, catalogue.positions, config.kernel_bandwidth)
        out = k @ catalogue.momenta[:, t, :]
    return out[0] if single else out


def warp_template(catalogue: Catalogue, t: int, config: ModelConfig) -> np.ndarray:
    """Warped source positions X_i + u_t(X_i).

    No clamping: warped points may exit the domain box.
    """
    t = _check_time(t, config)
    if catalogue.positions.shape[0] == 0:
        return catalogue.positions.copy()
    if not np.any(catalogue.momenta[:, t, :]):
        return catalogue.positions.copy()
    return catalogue.positions + displacement_at(catalogue.positions, catalogue, t, config)


def render_intensity(catalogue: Catalogue, t: int, config: ModelConfig) -> IntensityField:
    """Expected foreground image at time t: sum_i F_{i,t} psf(x - warp(X_i)).

    The background rate is not added; the PSF is evaluated exactly at every
    voxel center (no cutoff).
    """
    t = _check_time(t, config)
    grid = voxel_centers(config.grid_shape)
    if catalogue.positions.shape[0] == 0:
        values = np.zeros(config.grid_shape)
        return IntensityField(values=values, time_index=t)
    psf = GaussianPsf(config.psf_cov)
    warped = warp_template(catalogue, t, config)
    dens = psf.density(grid[None, :, :] - warped[:, None, :])  # (I, V)
    flat = catalogue.fluorescence[:, t] @ dens
    return IntensityField(values=flat.reshape(config.grid_shape), time_index=t)


def render_intensity_stack(catalogue: Catalogue, config: ModelConfig) -> np.ndarray:
    """Foreground intensity for every time point, stacked to (T, *grid_shape)."""
    return np.stack(
        [render_intensity(catalogue, t, config).values for t in range(config.num_times)]
    )


def rasterize_displacement(
    catalogue: Catalogue, t: int, config: ModelConfig, stride: int
) -> DisplacementField:
    """Displacement field sampled at voxel centers every `stride` voxels."""
    t = _check_time(t, config)
    stride = int(stride)
    if stride < 1:
        raise InvariantError(f"stride must be >= 1, got {stride}")
    axes = [np.arange(0, n, stride, dtype=float) for n in config.grid_shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    vecs = displacement_at(pts, catalogue, t, config)
    return DisplacementField(sample_points=pts, vectors=vecs, time_index=t)
