"""Exact samplers for Brownian increments and fractional Gaussian noise.

Both drivers live on a uniform grid ``0 = t_0 < ... < t_N = T``. Brownian and
fractional increments are always drawn from separate random streams so the two
sources are independent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

__all__ = [
    "CHOLESKY_MAX_N",
    "EIGENVALUE_CLAMP",
    "CirculantFGN",
    "CholeskyFGN",
    "GridSpec",
    "NoiseError",
    "NoisePath",
    "check_hurst",
    "fbm_covariance",
    "fgn_covariance",
    "fgn_sampler",
    "path_streams",
    "sample_brownian",
    "sample_fgn_cholesky",
    "sample_fgn_circulant",
    "sample_noise_batch",
    "sample_noise_path",
    "singular_kernel",
    "write_noise_csv",
]

CHOLESKY_MAX_N = 4096
EIGENVALUE_CLAMP = 1e-10


class NoiseError(ValueError):
    """Raised for invalid Hurst indices, grids, or failed factorizations."""


def check_hurst(h: float, degenerate: bool = False) -> float:
    """Validate a Hurst index; ``h == 0.5`` is accepted only with ``degenerate``."""
    h = float(h)
    if degenerate and h == 0.5:
        return h
    if not 0.5 < h < 1.0:
        raise NoiseError(f"Hurst index must lie in (1/2, 1), got {h}")
    return h


@dataclass(frozen=True)
class GridSpec:
    """Uniform partition of ``[0, horizon]`` into ``steps`` cells."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0 or not math.isfinite(self.horizon):
            raise NoiseError(f"horizon must be positive and finite, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise NoiseError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def delta(self) -> float:
        return self.horizon / self.steps

    def node(self, k: int) -> float:
        if not 0 <= k <= self.steps:
            raise NoiseError(f"node index {k} outside 0..{self.steps}")
        # the last node is pinned to the horizon so node(N) == T exactly
        return self.horizon if k == self.steps else k * self.delta

    def nodes(self) -> np.ndarray:
        t = np.arange(self.steps + 1) * self.delta
        t[-1] = self.horizon
        return t

    def coarsen(self, factor: int) -> GridSpec:
        if self.steps % factor:
            raise NoiseError(f"factor {factor} does not divide {self.steps}")
        return GridSpec(self.horizon, self.steps // factor)


# ---------------------------------------------------------------------------
# Covariances
# ---------------------------------------------------------------------------


def fbm_covariance(t: float, s: float, h: float) -> float:
    """E[B^H_t B^H_s] = (t^{2H} + s^{2H} - |t-s|^{2H}) / 2."""
    if t < 0 or s < 0:
        raise NoiseError(f"fBm covariance needs nonnegative times, got t={t}, s={s}")
    two_h = 2.0 * h
    return 0.5 * (t**two_h + s**two_h - abs(t - s) ** two_h)


def fgn_covariance(lag, h: float, delta: float):
    """Autocovariance of fractional Gaussian noise with mesh ``delta``.

    ``lag`` may be an integer or an integer array; the result has the same
    shape.
    """
    if not delta > 0:
        raise NoiseError(f"delta must be positive, got {delta}")
    k = np.abs(np.asarray(lag, dtype=float))
    two_h = 2.0 * h
    g = 0.5 * delta**two_h * (
        (k + 1.0) ** two_h - 2.0 * k**two_h + np.abs(k - 1.0) ** two_h
    )
    return float(g) if g.ndim == 0 else g


def singular_kernel(t: float, s: float, h: float) -> float:
    """The kernel H(2H-1)|t-s|^{2H-2} of the fBm inner product."""
    if t == s:
        raise NoiseError("singular kernel diverges on the diagonal t == s")
    return h * (2.0 * h - 1.0) * abs(t - s) ** (2.0 * h - 2.0)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def sample_brownian(grid: GridSpec, stream: np.random.Generator) -> np.ndarray:
    return stream.normal(0.0, math.sqrt(grid.delta), size=grid.steps)


class CholeskyFGN:
    """fGn sampler using the lower-triangular factor of the Toeplitz covariance.

    The factor is computed once; ``transform`` maps standard normals of shape
    ``(..., n)`` to increments of the same shape.
    """

    method = "cholesky"

    def __init__(self, n: int, h: float, delta: float):
        if n > CHOLESKY_MAX_N:
            raise NoiseError(
                f"Cholesky sampler limited to N <= {CHOLESKY_MAX_N}, got {n}"
            )
        self.n, self.h, self.delta = n, h, delta
        gamma = fgn_covariance(np.arange(n), h, delta)
        idx = np.arange(n)
        cov = np.atleast_1d(gamma)[np.abs(idx[:, None] - idx[None, :])]
        try:
            factor = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NoiseError(
                f"Cholesky factorization of the fGn covariance failed (N={n}, H={h})"
            ) from exc
        factor.setflags(write=False)
        self.factor = factor

    @property
    def normals_needed(self) -> int:
        return self.n

    def transform(self, z: np.ndarray) -> np.ndarray:
        return z @ self.factor.T

    def sample(self, stream: np.random.Generator) -> np.ndarray:
        return self.transform(stream.standard_normal(self.n))


class CirculantFGN:
    """Davies-Harte circulant embedding sampler for fGn.

    The Toeplitz covariance of ``n`` increments is embedded in a circulant
    matrix of size ``2m`` where ``m`` is the smallest power of two ``>= n``.
    Its eigenvalues are the FFT of the first row.
    """

    method = "circulant"

    def __init__(self, n: int, h: float, delta: float, clamp: float = EIGENVALUE_CLAMP):
        self.n, self.h, self.delta = n, h, delta
        m = 1 << max(0, (n - 1).bit_length())
        self.size = 2 * m
        gamma = fgn_covariance(np.arange(m + 1), h, delta)
        row = np.concatenate([gamma, gamma[-2:0:-1]])
        eig = np.fft.fft(row).real
        tol = clamp * eig.max()
        if eig.min() < -tol:
            raise NoiseError(
                f"circulant embedding has a negative eigenvalue {eig.min():.3e} "
                f"(N={n}, H={h})"
            )
        eig = np.where(eig < 0.0, 0.0, eig)
        scale = np.sqrt(eig / self.size)
        scale.setflags(write=False)
        self.scale = scale
        self.eigenvalues = eig

    @property
    def normals_needed(self) -> int:
        return 2 * self.size

    def transform(self, z: np.ndarray) -> np.ndarray:
        """Map ``(..., 2 * size)`` standard normals to ``(..., n)`` increments."""
        half = self.size
        w = self.scale * (z[..., :half] + 1j * z[..., half:])
        return np.fft.fft(w, axis=-1).real[..., : self.n]

    def sample(self, stream: np.random.Generator) -> np.ndarray:
        return self.transform(stream.standard_normal(self.normals_needed))


@lru_cache(maxsize=64)
def fgn_sampler(n: int, h: float, delta: float, method: str = "auto"):
    """Shared, immutable sampler tables keyed by grid and Hurst index."""
    if method == "auto":
        method = "cholesky" if n <= CHOLESKY_MAX_N else "circulant"
    if method == "cholesky":
        return CholeskyFGN(n, h, delta)
    if method == "circulant":
        return CirculantFGN(n, h, delta)
    raise NoiseError(f"unknown fGn sampler {method!r}")


def sample_fgn_cholesky(
    grid: GridSpec, h: float, stream: np.random.Generator
) -> np.ndarray:
    return fgn_sampler(grid.steps, h, grid.delta, "cholesky").sample(stream)


def sample_fgn_circulant(
    grid: GridSpec, h: float, stream: np.random.Generator
) -> np.ndarray:
    return fgn_sampler(grid.steps, h, grid.delta, "circulant").sample(stream)


# ---------------------------------------------------------------------------
# Noise paths
# ---------------------------------------------------------------------------


def path_streams(
    base_seed: int, path_index: int = 0
) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (Brownian, fractional) generators for one path.

    Each stream depends only on ``(base_seed, path_index)``, never on the order
    in which paths are generated.
    """
    root = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(path_index),))
    ss_w, ss_bh = root.spawn(2)
    return np.random.default_rng(ss_w), np.random.default_rng(ss_bh)


@dataclass(frozen=True)
class NoisePath:
    grid: GridSpec
    dW: np.ndarray
    dBH: np.ndarray
    seed: tuple = field(default=())

    def __post_init__(self):
        n = self.grid.steps
        if self.dW.shape != (n,) or self.dBH.shape != (n,):
            raise NoiseError(
                f"increment arrays must have length {n}, got {self.dW.shape} and {self.dBH.shape}"
            )

    def coarsen(self, factor: int) -> NoisePath:
        grid = self.grid.coarsen(factor)
        return NoisePath(
            grid,
            self.dW.reshape(grid.steps, factor).sum(axis=1),
            self.dBH.reshape(grid.steps, factor).sum(axis=1),
            self.seed + (("coarsen", factor),),
        )


def sample_noise_path(
    grid: GridSpec,
    h: float,
    seed: int,
    path_index: int = 0,
    sampler: str = "auto",
    degenerate: bool = False,
) -> NoisePath:
    check_hurst(h, degenerate)
    w_stream, bh_stream = path_streams(seed, path_index)
    dW = sample_brownian(grid, w_stream)
    dBH = fgn_sampler(grid.steps, h, grid.delta, sampler).sample(bh_stream)
    return NoisePath(grid, dW, dBH, (int(seed), int(path_index)))


def sample_noise_batch(
    grid: GridSpec,
    h: float,
    seed: int,
    path_indices,
    sampler: str = "auto",
    degenerate: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Increments of many paths as ``(len(path_indices), N)`` arrays.

    Row ``j`` carries the same draws as ``sample_noise_path(...,
    path_indices[j])``; the two agree to rounding (BLAS may group the
    Cholesky products differently for a batch), and a given batch is always
    reproduced bit for bit.
    """
    check_hurst(h, degenerate)
    fgn = fgn_sampler(grid.steps, h, grid.delta, sampler)
    sd = math.sqrt(grid.delta)
    dW = np.empty((len(path_indices), grid.steps))
    z = np.empty((len(path_indices), fgn.normals_needed))
    for row, i in enumerate(path_indices):
        w_stream, bh_stream = path_streams(seed, i)
        dW[row] = w_stream.normal(0.0, sd, size=grid.steps)
        z[row] = bh_stream.standard_normal(fgn.normals_needed)
    return dW, fgn.transform(z)


def write_noise_csv(path: Path | str, noise: NoisePath) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["k", "dW", "dBH"])
        for k, (w, b) in enumerate(zip(noise.dW, noise.dBH)):
            out.writerow([k, f"{w:.17g}", f"{b:.17g}"])
