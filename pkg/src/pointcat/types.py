"""Core domain types: model configuration, catalogue state, and image stacks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class InvariantError(ValueError):
    """A domain object violates one of its structural invariants."""


def _check_spd(mat: np.ndarray, dim: int, name: str) -> np.ndarray:
    m = np.asarray(mat, dtype=float)
    if m.shape != (dim, dim):
        raise InvariantError(f"{name} must be {dim}x{dim}, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvariantError(f"{name} has non-finite entries")
    if not np.allclose(m, m.T, rtol=1e-12, atol=1e-12):
        raise InvariantError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise InvariantError(f"{name} is not positive definite") from None
    return m


@dataclass(frozen=True)
class ModelConfig:
    """Fixed hyperparameters of the observation model.

    All lengths are in voxel units; the domain is the box
    [0, grid_shape[k]) per axis with voxel centers at integer coordinates.
    """

    dim: int
    grid_shape: tuple[int, ...]
    num_sources: int
    num_times: int
    psf_cov: np.ndarray
    motion_cov: np.ndarray
    fluor_scale: float        # mean of the exponential fluorescence prior, photons
    background_scale: float   # half-normal scale of the background rate
    kernel_bandwidth: float   # Gaussian kernel bandwidth, voxels

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise InvariantError(f"dim must be 2 or 3, got {self.dim}")
        shape = tuple(int(n) for n in self.grid_shape)
        if len(shape) != self.dim or any(n < 1 for n in shape):
            raise InvariantError(f"grid_shape {shape} inconsistent with dim {self.dim}")
        object.__setattr__(self, "grid_shape", shape)
        # num_sources == 0 is allowed: a background-only model with an empty
        # catalogue is a valid degenerate configuration.
        if self.num_sources < 0 or self.num_times < 1:
            raise InvariantError("need num_sources >= 0 and num_times >= 1")
        object.__setattr__(self, "psf_cov", _check_spd(self.psf_cov, self.dim, "psf_cov"))
        object.__setattr__(self, "motion_cov", _check_spd(self.motion_cov, self.dim, "motion_cov"))
        for name in ("fluor_scale", "background_scale", "kernel_bandwidth"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v > 0):
                raise InvariantError(f"{name} must be a positive finite real, got {v}")
            object.__setattr__(self, name, v)

    @property
    def extents(self) -> np.ndarray:
        """Axis lengths of the domain box, as floats."""
        return np.asarray(self.grid_shape, dtype=float)

    @property
    def num_parameters(self) -> int:
        """Flat parameter count: dim*I + I*T + dim*I*T + 1."""
        i, t, d = self.num_sources, self.num_times, self.dim
        return d * i + i * t + d * i * t + 1

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "grid_shape": list(self.grid_shape),
            "num_sources": self.num_sources,
            "num_times": self.num_times,
            "psf_cov": self.psf_cov.tolist(),
            "motion_cov": self.motion_cov.tolist(),
            "fluor_scale": self.fluor_scale,
            "background_scale": self.background_scale,
            "kernel_bandwidth": self.kernel_bandwidth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {
            "dim", "grid_shape", "num_sources", "num_times", "psf_cov",
            "motion_cov", "fluor_scale", "background_scale", "kernel_bandwidth",
        }
        extra = set(d) - known
        if extra:
            raise InvariantError(f"unknown model config keys: {sorted(extra)}")
        missing = known - set(d)
        if missing:
            raise InvariantError(f"missing model config keys: {sorted(missing)}")
        return cls(
            dim=int(d["dim"]),
            grid_shape=tuple(d["grid_shape"]),
            num_sources=int(d["num_sources"]),
            num_times=int(d["num_times"]),
            psf_cov=np.asarray(d["psf_cov"], dtype=float),
            motion_cov=np.asarray(d["motion_cov"], dtype=float),
            fluor_scale=float(d["fluor_scale"]),
            background_scale=float(d["background_scale"]),
            kernel_bandwidth=float(d["kernel_bandwidth"]),
        )


@dataclass
class Catalogue:
    """Full latent state: source positions, per-time fluorescence and momenta,
    and the scalar background rate."""

    positions: np.ndarray      # (I, dim) voxel coordinates
    fluorescence: np.ndarray   # (I, T) photons, nonnegative
    momenta: np.ndarray        # (I, T, dim) voxels
    background: float          # photons/voxel, nonnegative

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.fluorescence = np.asarray(self.fluorescence, dtype=float)
        self.momenta = np.asarray(self.momenta, dtype=float)
        self.background = float(self.background)

    def validate(self, config: ModelConfig) -> None:
        i, t, d = config.num_sources, config.num_times, config.dim
        if self.positions.shape != (i, d):
            raise InvariantError(f"positions shape {self.positions.shape} != {(i, d)}")
        if self.fluorescence.shape != (i, t):
            raise InvariantError(f"fluorescence shape {self.fluorescence.shape} != {(i, t)}")
        if self.momenta.shape != (i, t, d):
            raise InvariantError(f"momenta shape {self.momenta.shape} != {(i, t, d)}")
        for name in ("positions", "fluorescence", "momenta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvariantError(f"{name} has non-finite entries")
        if not np.isfinite(self.background) or self.background < 0:
            raise InvariantError(f"background must be finite and >= 0, got {self.background}")
        if np.any(self.fluorescence < 0):
            raise InvariantError("fluorescence entries must be >= 0")
        lo_ok = np.all(self.positions >= 0.0)
        hi_ok = np.all(self.positions <= config.extents)
        if not (lo_ok and hi_ok):
            raise InvariantError("positions must lie inside the domain box")

    def copy(self) -> "Catalogue":
        return Catalogue(
            positions=self.positions.copy(),
            fluorescence=self.fluorescence.copy(),
            momenta=self.momenta.copy(),
            background=self.background,
        )

    def allclose(self, other: "Catalogue", rtol: float = 1e-12, atol: float = 1e-12) -> bool:
        return (
            self.positions.shape == other.positions.shape
            and np.allclose(self.positions, other.positions, rtol=rtol, atol=atol)
            and np.allclose(self.fluorescence, other.fluorescence, rtol=rtol, atol=atol)
            and np.allclose(self.momenta, other.momenta, rtol=rtol, atol=atol)
            and np.isclose(self.background, other.background, rtol=rtol, atol=atol)
        )


@dataclass
class IntensityField:
    """Expected foreground photon rate per voxel at one time point."""

    values: np.ndarray
    time_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise InvariantError("intensity values must be finite and nonnegative")


@dataclass
class DisplacementField:
    """Displacement vectors sampled on a sub-grid of the domain."""

    sample_points: np.ndarray  # (n, dim)
    vectors: np.ndarray        # (n, dim)
    time_index: int

    def __post_init__(self):
        self.sample_points = np.asarray(self.sample_points, dtype=float)
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.sample_points.shape != self.vectors.shape:
            raise InvariantError("sample_points and vectors must have matching shapes")


@dataclass
class ObservationStack:
    """Observed photon counts over the voxel grid and all time points."""

    counts: np.ndarray  # (T, *grid_shape), nonnegative integers

    def __post_init__(self):
        c = np.asarray(self.counts)
        if not np.issubdtype(c.dtype, np.integer):
            rounded = np.rint(c)
            if not np.array_equal(rounded, c):
                raise InvariantError("counts must be integer-valued")
            c = rounded.astype(np.int64)
        if np.any(c < 0):
            raise InvariantError("counts must be nonnegative")
        self.counts = c

    @property
    def num_times(self) -> int:
        return self.counts.shape[0]

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return tuple(self.counts.shape[1:])

    def validate(self, config: ModelConfig) -> None:
        if self.num_times != config.num_times:
            raise InvariantError(
                f"observation has T={self.num_times}, config expects {config.num_times}")
        if self.grid_shape != config.grid_shape:
            raise InvariantError(
                f"observation grid {self.grid_shape} != config grid {config.grid_shape}")


def voxel_centers(grid_shape: Iterable[int]) -> np.ndarray:
    """Integer voxel-center coordinates of the grid, flattened row-major to (V, dim)."""
    shape = tuple(int(n) for n in grid_shape)
    axes = [np.arange(n, dtype=float) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)
