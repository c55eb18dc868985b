"""Self-consistent solution of the kernel system and observable prediction."""

import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import analytic, mc
from . import model as mdl
from .errors import NonConvergenceError, StructuralError, UnsupportedModelError
from .grid import TimeGrid
from .kernels import COVARIANCE, RESPONSE, DMFTState, ThetaKernels, TwoTimeKernel
from .sampling import derive_seeds, rng_from

ANALYTIC = "analytic"
MONTE_CARLO = "monte_carlo"
HYBRID = "hybrid"


@dataclass
class SolveOptions:
    max_iters: int = 50
    tol: Optional[float] = None  # None: 1e-4 analytic, 3 * MC stderr otherwise
    damping: float = 1.0
    mc_samples: int = 10000
    mode: str = ANALYTIC
    seed: int = 0
    chunk: int = mc.DEFAULT_CHUNK

    def __post_init__(self):
        if not (0.0 < self.damping <= 1.0):
            raise StructuralError("damping must lie in (0, 1]")
        if self.tol is not None and self.tol <= 0:
            raise StructuralError("tol must be positive")
        if self.mode not in (ANALYTIC, MONTE_CARLO, HYBRID):
            raise StructuralError(f"unknown mode {self.mode!r}")


@dataclass
class ConvergenceReport:
    mode: str
    converged: bool
    distances: List[float] = field(default_factory=list)
    wall_times: List[float] = field(default_factory=list)
    tol_used: float = float("nan")
    damping_used: float = 1.0
    oscillation_fallback: bool = False

    def rows(self):
        return [
            (i + 1, d, w)
            for i, (d, w) in enumerate(zip(self.distances, self.wall_times))
        ]


def free_theta_kernels(spec, grid: TimeGrid) -> ThetaKernels:
    """Exact kernels of the zero-learning-rate dynamics: theta^t = theta^0."""
    p, k, k_star = grid.n_points, spec.k, spec.k_star
    c = np.tile(spec.init_law.self_block, (p, p, 1, 1))
    star = np.tile(spec.init_law.cross_block, (p, 1, 1))
    r = np.zeros((p, p, k, k))
    t_idx, s_idx = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    r[s_idx < t_idx] = np.eye(k)
    return ThetaKernels(
        c_theta=TwoTimeKernel(grid, k, k, c, COVARIANCE),
        c_theta_star=star,
        c_star_star=spec.init_law.star_block.copy(),
        r_theta=TwoTimeKernel(grid, k, k, r, RESPONSE),
    )


def _component_sup(a, b):
    return float(np.abs(a - b).max())


def theta_distance(a: ThetaKernels, b: ThetaKernels) -> float:
    """Sup-norm distance on the (C_theta + stars, R_theta) component."""
    if not a.c_theta.grid.same_as(b.c_theta.grid):
        raise StructuralError("kernel grids differ")
    return max(
        _component_sup(a.c_theta.blocks, b.c_theta.blocks),
        _component_sup(a.c_theta_star, b.c_theta_star),
        _component_sup(a.c_star_star, b.c_star_star),
        _component_sup(a.r_theta.blocks, b.r_theta.blocks),
    )


def kernel_distance(a: DMFTState, b: DMFTState) -> float:
    """Max over all six components (star blocks included) of entrywise sup norms."""
    if a.c_theta.blocks.shape != b.c_theta.blocks.shape or a.r_f_star.shape != b.r_f_star.shape:
        raise StructuralError("state shapes differ")
    if not a.grid.same_as(b.grid):
        raise StructuralError("kernel grids differ")
    return max(
        theta_distance(a.theta, b.theta),
        _component_sup(a.c_f.blocks, b.c_f.blocks),
        _component_sup(a.r_f.blocks, b.r_f.blocks),
        _component_sup(a.r_f_star, b.r_f_star),
        _component_sup(a.gamma, b.gamma),
    )


def _damp_theta(old: ThetaKernels, new: ThetaKernels, omega: float) -> ThetaKernels:
    if omega >= 1.0:
        return new

    def mix(x, y):
        return (1.0 - omega) * x + omega * y

    grid, k = old.c_theta.grid, old.c_theta.rows
    return ThetaKernels(
        c_theta=TwoTimeKernel(grid, k, k, mix(old.c_theta.blocks, new.c_theta.blocks), COVARIANCE),
        c_theta_star=mix(old.c_theta_star, new.c_theta_star),
        c_star_star=mix(old.c_star_star, new.c_star_star),
        r_theta=TwoTimeKernel(grid, k, k, mix(old.r_theta.blocks, new.r_theta.blocks), RESPONSE),
        stderr=new.stderr,
    )


def _check_mode(spec, mode):
    if mode == ANALYTIC:
        if not isinstance(spec.loss, mdl.SquaredLoss) or not isinstance(
            spec.activation, mdl.LinearActivation
        ):
            raise UnsupportedModelError("analytic mode needs squared loss and linear activation")
    if mode in (ANALYTIC, HYBRID) and spec.regularizer is None:
        raise UnsupportedModelError("ridge regularizer required")


def solve(spec, grid: TimeGrid, options: SolveOptions = None) -> Tuple[DMFTState, ConvergenceReport]:
    """Iterate the two kernel maps from the free state until self-consistency.

    Monte Carlo maps reuse one seed stream across iterations (common random
    numbers), so each iteration applies the same deterministic map and the
    distance trace is meaningful.
    """
    options = options or SolveOptions()
    _check_mode(spec, options.mode)
    omega = options.damping
    report = ConvergenceReport(mode=options.mode, converged=False, damping_used=omega)

    def xi_map(theta_k):
        if options.mode == ANALYTIC:
            return analytic.linear_map(spec, theta_k, grid=grid)
        return mc.estimate_xi_kernels(
            spec, theta_k, options.mc_samples, options.seed, grid=grid, chunk=options.chunk
        )

    def theta_map(xi_k):
        if options.mode in (ANALYTIC, HYBRID):
            return analytic.ridge_map(spec, xi_k, grid=grid)
        return mc.estimate_theta_kernels(
            spec, xi_k, options.mc_samples, options.seed + 1, grid=grid, chunk=options.chunk
        )

    theta = free_theta_kernels(spec, grid)
    xi = None
    mc_tol = None
    rising = 0
    for it in range(options.max_iters):
        t0 = time.perf_counter()
        xi = xi_map(theta)
        theta_new = theta_map(xi)
        dist = theta_distance(theta, theta_new)
        report.distances.append(dist)
        report.wall_times.append(time.perf_counter() - t0)

        if options.tol is not None:
            tol = options.tol
        elif options.mode == ANALYTIC:
            tol = 1e-4
        else:
            # 3x the largest kernel stderr of the MC half-map, frozen at iteration 1
            if mc_tol is None:
                errs = (xi.stderr or {}).values()
                mc_tol = 3.0 * max((float(np.max(e)) for e in errs), default=1e-4)
            tol = mc_tol
        report.tol_used = tol

        if len(report.distances) >= 6 and dist > 10.0 * report.distances[-6]:
            raise NonConvergenceError(
                f"fixed-point iteration diverging at iteration {it + 1}",
                distances=report.distances,
            )
        if len(report.distances) >= 2 and dist > report.distances[-2]:
            rising += 1
            if rising >= 2 and omega > 0.5 and not report.oscillation_fallback:
                omega = 0.5
                report.oscillation_fallback = True
                report.damping_used = omega
        else:
            rising = 0

        theta = _damp_theta(theta, theta_new, omega)
        if dist <= tol:
            report.converged = True
            break

    if xi is None:
        xi = xi_map(theta)
    return DMFTState(theta=theta, xi=xi), report


# ---------------------------------------------------------------------------
# predicted observables from a converged state

@dataclass
class PredictedObservables:
    times: np.ndarray
    overlap: np.ndarray  # (P, k, k_star)
    self_overlap: np.ndarray  # (P, k, k)
    train_loss: np.ndarray  # (P,)
    train_loss_stderr: np.ndarray
    xi_cdf: np.ndarray  # (P, n_thresholds)
    xi_cdf_stderr: np.ndarray
    thresholds: tuple


def predict_observables(state: DMFTState, spec, n_samples: int = 10000, seed=0,
                        thresholds=(1.0,), chunk: int = 1024) -> PredictedObservables:
    """Observable curves implied by a converged state.

    Overlap and self-overlap are read directly from C_theta; the training loss
    and the CDF of |xi| are Monte Carlo expectations over the xi process.
    """
    grid = state.grid
    p = grid.n_points
    overlap = state.c_theta_star.copy()
    self_overlap = state.c_theta.blocks[np.arange(p), np.arange(p)].copy()

    theta = state.theta
    sampler = mc.GPSampler(theta.c_theta, star=theta.c_theta_star, star_star=theta.c_star_star)
    loss_acc = mc._Accumulator((p,))
    cdf_acc = mc._Accumulator((p, len(thresholds)))
    thr = np.asarray(thresholds, dtype=float)
    seeds = derive_seeds(seed, n_samples)
    for lo in range(0, n_samples, chunk):
        hi = min(lo + chunk, n_samples)
        draws = [mc._draw_xi(rng_from(s), sampler, spec, grid.N, grid.delta) for s in seeds[lo:hi]]
        normals = np.stack([d[0] for d in draws])
        eps = np.array([d[1] for d in draws])
        z = np.stack([d[2] for d in draws])
        w_paths, w_stars = sampler.paths_from_normals(normals)
        res = mc._xi_engine(spec, grid, theta.r_theta.blocks, w_paths, w_stars, eps, z,
                            want_responses=False)
        xi = res["xi"]
        y = mdl.labels(spec, w_stars[:, None, :], eps[:, None])
        losses = spec.loss.value(spec.activation.value(xi), y)
        loss_acc.add(losses)
        norms = np.linalg.norm(xi, axis=-1)
        cdf_acc.add((norms[:, :, None] <= thr[None, None, :]).astype(float))

    return PredictedObservables(
        times=grid.times,
        overlap=overlap,
        self_overlap=self_overlap,
        train_loss=loss_acc.mean(),
        train_loss_stderr=loss_acc.stderr(),
        xi_cdf=cdf_acc.mean(),
        xi_cdf_stderr=cdf_acc.stderr(),
        thresholds=tuple(thresholds),
    )
