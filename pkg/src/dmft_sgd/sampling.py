"""Seed derivation, driver-noise increments, and Gaussian-process sampling."""

from typing import Optional, Union

import numpy as np

from .errors import InvalidInputError, KernelNotPSDError
from .kernels import COVARIANCE, TwoTimeKernel

SeedLike = Union[int, np.random.SeedSequence]

JITTER_SCHEDULE = (0.0, 1e-12, 1e-10, 1e-8)


def as_seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def derived_seed(seed: SeedLike, index: int) -> np.random.SeedSequence:
    """The index-th child seed; matches derive_seeds(seed, n)[index] exactly."""
    root = as_seed_sequence(seed)
    return np.random.SeedSequence(entropy=root.entropy, spawn_key=root.spawn_key + (index,))


def derive_seeds(seed: SeedLike, n: int):
    return [derived_seed(seed, m) for m in range(n)]


def rng_from(seed: SeedLike) -> np.random.Generator:
    return np.random.default_rng(as_seed_sequence(seed))


# ---------------------------------------------------------------------------
# driver increments z^t: Poisson(delta*kappa_bar) for SGD, matching Gaussian for SME

def driver_increments(driver: str, rng: np.random.Generator, n_steps: int,
                      kappa_bar: float, delta: float, size: Optional[int] = None):
    """iid increments with mean and variance delta*kappa_bar."""
    if kappa_bar <= 0 or delta <= 0:
        raise InvalidInputError("kappa_bar and delta must be positive")
    mean = delta * kappa_bar
    shape = (n_steps,) if size is None else (size, n_steps)
    if driver == "poisson":
        return rng.poisson(mean, shape).astype(float)
    if driver == "gaussian":
        return rng.normal(mean, np.sqrt(mean), shape)
    raise InvalidInputError(f"unknown driver {driver!r}")


def sample_driver(driver: str, n_steps: int, kappa_bar: float, delta: float, seed: SeedLike):
    """One draw of the n_steps driver increments for the given seed."""
    return driver_increments(driver, rng_from(seed), n_steps, kappa_bar, delta)


# ---------------------------------------------------------------------------
# Gaussian-process sampling via Cholesky with a jitter ladder

def cholesky_with_jitter(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding eps*mean(diag) jitter if needed.

    Coordinates with zero diagonal are exactly zero for a PSD matrix and are
    factored out first; this keeps e.g. the t=0 slot of C_f noiseless instead
    of polluting it with jitter.
    """
    mat = np.asarray(mat, dtype=float)
    diag = np.diag(mat)
    tiny = 1e-12 * max(float(diag.max(initial=0.0)), 1.0)
    dead = (diag <= 0.0) & (np.abs(mat).max(axis=1) <= tiny)
    active = ~dead
    L = np.zeros_like(mat)
    if not np.any(active):
        return L
    sub = mat[np.ix_(active, active)]
    scale = float(np.mean(np.diag(sub)))
    for eps in JITTER_SCHEDULE:
        try:
            Ls = np.linalg.cholesky(sub + eps * scale * np.eye(sub.shape[0]))
            L[np.ix_(active, active)] = Ls
            return L
        except np.linalg.LinAlgError:
            continue
    raise KernelNotPSDError("covariance kernel is not PSD even after maximal jitter")


class GPSampler:
    """Reusable sampler for a mean-zero GP on the grid, optionally joint with w_star.

    The per-draw arithmetic uses einsum so that a draw is bit-identical whether
    produced alone or inside a batch.
    """

    def __init__(self, kernel: TwoTimeKernel, star: Optional[np.ndarray] = None,
                 star_star: Optional[np.ndarray] = None):
        if kernel.kind != COVARIANCE:
            raise InvalidInputError("GP sampling needs a covariance kernel")
        self.grid = kernel.grid
        self.k = kernel.rows
        p = self.grid.n_points
        if star is None:
            full = kernel.full_matrix()
            self.k_star = 0
        else:
            self.k_star = star.shape[-1]
            dim = p * self.k + self.k_star
            full = np.zeros((dim, dim))
            full[: p * self.k, : p * self.k] = kernel.full_matrix()
            full[: p * self.k, p * self.k :] = star.reshape(p * self.k, self.k_star)
            full[p * self.k :, : p * self.k] = star.reshape(p * self.k, self.k_star).T
            full[p * self.k :, p * self.k :] = star_star
        full = 0.5 * (full + full.T)
        self.dim = full.shape[0]
        self.L = cholesky_with_jitter(full)

    def draw_normals(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.dim)

    def paths_from_normals(self, z: np.ndarray):
        """Map standard normals (..., dim) to (paths (..., P, k), w_star or None)."""
        x = np.einsum("ij,...j->...i", self.L, z)
        p = self.grid.n_points
        path = x[..., : p * self.k].reshape(z.shape[:-1] + (p, self.k))
        if self.k_star == 0:
            return path, None
        return path, x[..., p * self.k :]

    def sample(self, rng: np.random.Generator):
        return self.paths_from_normals(self.draw_normals(rng))


def sample_gp(kernel: TwoTimeKernel, seed: SeedLike, star: Optional[np.ndarray] = None,
              star_star: Optional[np.ndarray] = None):
    """One GP path on the kernel's grid (and the w_star draw if star blocks given)."""
    sampler = GPSampler(kernel, star=star, star_star=star_star)
    return sampler.sample(rng_from(seed))
