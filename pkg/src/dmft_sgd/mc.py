"""Monte Carlo simulation of the limit processes and kernel estimation.

Implements the discrete-time recursions for (theta, xi, r_theta, r_f,
r_f_star) on the grid and estimates the correlation/response kernels as
sample means.  All contractions use einsum so that trajectory m of a batched
run is bit-identical to a single run seeded with the m-th derived seed.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import model as mdl
from .errors import StructuralError
from .grid import TimeGrid
from .kernels import (
    COVARIANCE,
    RESPONSE,
    DMFTState,
    ThetaKernels,
    TwoTimeKernel,
    XiKernels,
    psd_project,
    psd_project_with_star,
)
from .sampling import GPSampler, derive_seeds, driver_increments, rng_from

DEFAULT_CHUNK = 256


@dataclass
class TrajectorySample:
    """One Monte Carlo draw of the limit processes (either half may be absent)."""

    theta_path: Optional[np.ndarray] = None  # (P, k)
    xi_path: Optional[np.ndarray] = None  # (P, k)
    r_theta: Optional[np.ndarray] = None  # (P, P, k, k), strictly causal
    r_f: Optional[np.ndarray] = None  # (P, P, k, k), strictly causal
    r_f_star: Optional[np.ndarray] = None  # (P, k, k_star)
    noise: Optional[dict] = None


def _theta_half(state) -> ThetaKernels:
    return state.theta if isinstance(state, DMFTState) else state


def _xi_half(state) -> XiKernels:
    return state.xi if isinstance(state, DMFTState) else state


# ---------------------------------------------------------------------------
# xi side: driven by the theta-side kernels (C_theta with stars, R_theta)

def _draw_xi(rng, sampler: GPSampler, spec, n_steps, delta):
    """Fixed draw order: GP normals, then eps, then driver increments."""
    normals = sampler.draw_normals(rng)
    eps = spec.noise_law.sample(rng, None)
    z = driver_increments(spec.driver, rng, n_steps, spec.kappa_bar, delta)
    return normals, float(eps), z


def _xi_engine(spec, grid: TimeGrid, r_theta_blocks, w_paths, w_stars, eps, z,
               want_responses=True):
    """Run the xi recursions for a batch.  Shapes: w_paths (B,P,k), z (B,N)."""
    B, P, k = w_paths.shape
    n = grid.N
    eta = spec.eta_on_grid(grid)
    weights = (eta[:n] / spec.kappa_bar)[None, :] * z  # (B, N)

    xi = np.empty((B, P, k))
    fvals = np.empty((B, P, k))
    incr = np.empty((B, n, k))  # (eta_r / kappa) f(xi^r) z^r
    xi[:, 0] = w_paths[:, 0]
    fvals[:, 0] = mdl.f_batch(spec, xi[:, 0], w_stars, eps)
    for t in range(1, P):
        r = t - 1
        incr[:, r] = weights[:, r, None] * fvals[:, r]
        xi[:, t] = w_paths[:, t] - np.einsum(
            "rij,brj->bi", r_theta_blocks[t, :t], incr[:, :t]
        )
        fvals[:, t] = mdl.f_batch(spec, xi[:, t], w_stars, eps)

    # phi^t = sum_{r<t} (eta_r/kappa) f(xi^r) z^r drives C_f
    phi = np.zeros((B, P, k))
    np.cumsum(incr, axis=1, out=phi[:, 1:])

    dxi = mdl.dxi_f_batch(spec, xi, w_stars[:, None, :], eps[:, None])
    out = {"xi": xi, "f": fvals, "phi": phi, "dxi": dxi}
    if not want_responses:
        return out

    dwst = mdl.dwstar_f_batch(spec, xi, w_stars[:, None, :], eps[:, None])
    k_star = dwst.shape[-1]

    r_f_star = np.empty((B, P, k, k_star))
    r_f_star[:, 0] = dwst[:, 0]
    gbuf = np.empty((B, n, k, k_star))  # (eta_r/kappa) z^r r_f_star^r
    for t in range(1, P):
        r = t - 1
        gbuf[:, r] = weights[:, r, None, None] * r_f_star[:, r]
        inner = np.einsum("rij,brjm->bim", r_theta_blocks[t, :t], gbuf[:, :t])
        r_f_star[:, t] = -np.einsum("bij,bjm->bim", dxi[:, t], inner) + dwst[:, t]

    r_f = np.zeros((B, P, P, k, k))
    for t in range(1, P):
        # boundary term at r = s plus the memory sum over s < r < t
        boundary = np.einsum(
            "bs,sij,bsjl->bsil", weights[:, :t], r_theta_blocks[t, :t], dxi[:, :t]
        )
        memory = np.einsum(
            "br,rij,brsjl->bsil", weights[:, :t], r_theta_blocks[t, :t], r_f[:, :t, :t]
        )
        r_f[:, t, :t] = -np.einsum("bij,bsjl->bsil", dxi[:, t], memory + boundary)

    out["r_f_star"] = r_f_star
    out["r_f"] = r_f
    return out


def _prep_xi(state, spec, grid):
    theta = _theta_half(state)
    if not theta.c_theta.grid.same_as(grid):
        raise StructuralError("kernel grid does not match the requested grid")
    sampler = GPSampler(theta.c_theta, star=theta.c_theta_star, star_star=theta.c_star_star)
    return theta, sampler


def sample_xi_trajectory(state, spec, seed, grid: Optional[TimeGrid] = None,
                         want_responses=True) -> TrajectorySample:
    """One draw of (xi-path, r_f, r_f_star) given the theta-side kernels."""
    grid = grid or _theta_half(state).c_theta.grid
    theta, sampler = _prep_xi(state, spec, grid)
    normals, eps, z = _draw_xi(rng_from(seed), sampler, spec, grid.N, grid.delta)
    w_path, w_star = sampler.paths_from_normals(normals[None, :])
    res = _xi_engine(spec, grid, theta.r_theta.blocks, w_path, w_star,
                     np.array([eps]), z[None, :], want_responses=want_responses)
    noise = {"w_path": w_path[0], "w_star": w_star[0], "eps": eps, "z": z}
    return TrajectorySample(
        xi_path=res["xi"][0],
        r_f=res["r_f"][0] if want_responses else None,
        r_f_star=res["r_f_star"][0] if want_responses else None,
        noise=noise,
    )


class _Accumulator:
    """Running sum and sum of squares for mean/stderr over samples."""

    def __init__(self, shape):
        self.s1 = np.zeros(shape)
        self.s2 = np.zeros(shape)
        self.n = 0

    def add(self, batch):
        self.s1 += batch.sum(axis=0)
        self.s2 += (batch**2).sum(axis=0)
        self.n += batch.shape[0]

    def add_outer(self, a, b):
        # mean of a[b,t,i] b[b,s,j] outer products without forming them per sample
        self.s1 += np.einsum("bti,bsj->tsij", a, b)
        self.s2 += np.einsum("bti,bsj->tsij", a**2, b**2)
        self.n += a.shape[0]

    def mean(self):
        return self.s1 / self.n

    def stderr(self):
        var = np.clip(self.s2 / self.n - (self.s1 / self.n) ** 2, 0.0, None)
        return np.sqrt(var / self.n)


def estimate_xi_kernels(spec, state, n_samples: int, seed, grid: Optional[TimeGrid] = None,
                        chunk: int = DEFAULT_CHUNK, project=True,
                        rf_shrink_window: Optional[float] = None) -> XiKernels:
    """Monte Carlo estimate of (C_f, R_f, R_f_star, Gamma) from the xi recursions.

    Sample m uses the m-th derived seed, so any single trajectory can be
    reproduced exactly with ``sample_xi_trajectory(..., derived_seed(seed, m))``.
    ``rf_shrink_window``, if set, zeroes R_f blocks with |t-s| beyond the
    window (off by default).
    """
    theta = _theta_half(state)
    grid = grid or theta.c_theta.grid
    theta, sampler = _prep_xi(state, spec, grid)
    p, k, k_star = grid.n_points, spec.k, spec.k_star

    acc_cf = _Accumulator((p, p, k, k))
    acc_rf = _Accumulator((p, p, k, k))
    acc_rfs = _Accumulator((p, k, k_star))
    acc_gamma = _Accumulator((p, k, k))

    seeds = derive_seeds(seed, n_samples)
    for lo in range(0, n_samples, chunk):
        hi = min(lo + chunk, n_samples)
        draws = [_draw_xi(rng_from(s), sampler, spec, grid.N, grid.delta) for s in seeds[lo:hi]]
        normals = np.stack([d[0] for d in draws])
        eps = np.array([d[1] for d in draws])
        z = np.stack([d[2] for d in draws])
        w_paths, w_stars = sampler.paths_from_normals(normals)
        res = _xi_engine(spec, grid, theta.r_theta.blocks, w_paths, w_stars, eps, z)
        acc_cf.add_outer(res["phi"], res["phi"])
        acc_rf.add(res["r_f"])
        acc_rfs.add(res["r_f_star"])
        acc_gamma.add(res["dxi"])

    c_f = TwoTimeKernel(grid, k, k, acc_cf.mean(), COVARIANCE)
    c_f.blocks = 0.5 * (c_f.blocks + c_f.blocks.transpose(1, 0, 3, 2))
    if project:
        c_f = psd_project(c_f)
    r_f_blocks = acc_rf.mean()
    if rf_shrink_window is not None:
        t, s = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        r_f_blocks[(t - s) * grid.delta > rf_shrink_window] = 0.0
    stderr = {
        "c_f": acc_cf.stderr(),
        "r_f": acc_rf.stderr(),
        "r_f_star": acc_rfs.stderr(),
        "gamma": acc_gamma.stderr(),
    }
    return XiKernels(
        c_f=c_f,
        r_f=TwoTimeKernel(grid, k, k, r_f_blocks, RESPONSE),
        r_f_star=acc_rfs.mean(),
        gamma=acc_gamma.mean(),
        stderr=stderr,
    )


# ---------------------------------------------------------------------------
# theta side: driven by the xi-side kernels (C_f, R_f, R_f_star, Gamma)

def _draw_theta(rng, init_law, sampler: GPSampler):
    """Fixed draw order: initialization pair, then GP normals."""
    theta0, theta_star = init_law.sample(rng)
    normals = sampler.draw_normals(rng)
    return theta0, theta_star, normals


def response_theta(spec, grid: TimeGrid, xi: XiKernels) -> np.ndarray:
    """r_theta via its discrete recursion; deterministic for ridge Dg.

    Returns the (P,P,k,k) strictly causal array with r_theta[s+1, s] = Id.
    """
    p, k = grid.n_points, spec.k
    eta = spec.eta_on_grid(grid)
    dg = spec.regularizer.dg(k)
    gamma_blocks = xi.gamma
    rf = xi.r_f.blocks
    gam = spec.gamma
    out = np.zeros((p, p, k, k))
    eye = np.eye(k)
    for t in range(1, p):
        r = t - 1
        out[t, r] = eye
        if t == 1:
            continue
        local = np.einsum("ij,sjl->sil", gam * gamma_blocks[r] + dg, out[r, : t - 1])
        memory = np.einsum("qij,qsjl->sil", rf[r, :r], out[:r, : t - 1])
        out[t, : t - 1] = out[r, : t - 1] - grid.delta * eta[r] * (local + gam * memory)
    return out


def _theta_engine(spec, grid: TimeGrid, xi: XiKernels, theta0, theta_star, u_paths):
    """Run the theta recursion for a batch.  Shapes: theta0 (B,k), u (B,P,k)."""
    B, P, k = u_paths.shape
    eta = spec.eta_on_grid(grid)
    gam = spec.gamma
    sqrt_gam = np.sqrt(gam)
    rf = xi.r_f.blocks
    rfs = xi.r_f_star
    gamma_blocks = xi.gamma

    theta = np.empty((B, P, k))
    theta[:, 0] = theta0 + sqrt_gam * u_paths[:, 0]
    drift = np.zeros((B, k))
    for t in range(1, P):
        r = t - 1
        force = (
            gam * np.einsum("ij,bj->bi", gamma_blocks[r], theta[:, r])
            + spec.regularizer.g(theta[:, r])
            + gam * np.einsum("qij,bqj->bi", rf[r, :r], theta[:, :r])
            + gam * np.einsum("im,bm->bi", rfs[r], theta_star)
        )
        drift += grid.delta * eta[r] * force
        theta[:, t] = theta0 - drift + sqrt_gam * u_paths[:, t]
    return theta


def sample_theta_trajectory(state, spec, seed, grid: Optional[TimeGrid] = None) -> TrajectorySample:
    """One draw of (theta-path, r_theta) given the xi-side kernels."""
    xi = _xi_half(state)
    grid = grid or xi.c_f.grid
    sampler = GPSampler(xi.c_f)
    theta0, theta_star, normals = _draw_theta(rng_from(seed), spec.init_law, sampler)
    u_path, _ = sampler.paths_from_normals(normals[None, :])
    theta = _theta_engine(spec, grid, xi, theta0[None, :], theta_star[None, :], u_path)
    return TrajectorySample(
        theta_path=theta[0],
        r_theta=response_theta(spec, grid, xi),
        noise={"theta0": theta0, "theta_star": theta_star, "u_path": u_path[0]},
    )


def estimate_theta_kernels(spec, state, n_samples: int, seed,
                           grid: Optional[TimeGrid] = None, chunk: int = DEFAULT_CHUNK,
                           project=True) -> ThetaKernels:
    """Monte Carlo estimate of (C_theta with star blocks, R_theta)."""
    xi = _xi_half(state)
    grid = grid or xi.c_f.grid
    if not xi.c_f.grid.same_as(grid):
        raise StructuralError("kernel grid does not match the requested grid")
    p, k, k_star = grid.n_points, spec.k, spec.k_star
    sampler = GPSampler(xi.c_f)

    acc_ct = _Accumulator((p, p, k, k))
    acc_star = _Accumulator((p, k, k_star))
    acc_ss = _Accumulator((k_star, k_star))

    seeds = derive_seeds(seed, n_samples)
    for lo in range(0, n_samples, chunk):
        hi = min(lo + chunk, n_samples)
        draws = [_draw_theta(rng_from(s), spec.init_law, sampler) for s in seeds[lo:hi]]
        theta0 = np.stack([d[0] for d in draws])
        theta_star = np.stack([d[1] for d in draws])
        normals = np.stack([d[2] for d in draws])
        u_paths, _ = sampler.paths_from_normals(normals)
        theta = _theta_engine(spec, grid, xi, theta0, theta_star, u_paths)
        acc_ct.add_outer(theta, theta)
        acc_star.add(np.einsum("bti,bm->btim", theta, theta_star))
        acc_ss.add(np.einsum("bi,bj->bij", theta_star, theta_star))

    c_theta = TwoTimeKernel(grid, k, k, acc_ct.mean(), COVARIANCE)
    c_theta.blocks = 0.5 * (c_theta.blocks + c_theta.blocks.transpose(1, 0, 3, 2))
    c_star = acc_star.mean()
    c_ss = 0.5 * (acc_ss.mean() + acc_ss.mean().T)
    if project:
        c_theta, c_star, c_ss = psd_project_with_star(c_theta, c_star, c_ss)
    r_theta = TwoTimeKernel(grid, k, k, response_theta(spec, grid, xi), RESPONSE)
    stderr = {"c_theta": acc_ct.stderr(), "c_theta_star": acc_star.stderr(),
              "c_star_star": acc_ss.stderr()}
    return ThetaKernels(
        c_theta=c_theta, c_theta_star=c_star, c_star_star=c_ss, r_theta=r_theta,
        stderr=stderr,
    )
