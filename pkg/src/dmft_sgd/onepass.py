"""Self-consistent overlap ODE of one-pass SGD in the data-rich limit.

The overlap matrices m = E[theta x theta_star] and q = E[theta x theta]
evolve under drift/diffusion coefficients that are expectations over the
current Gaussian law of (w, w_star) and the label noise; the coefficients
are refreshed from the running covariance at every Euler step.
"""

from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .errors import UnsupportedModelError

GH_ORDER = 40
GH_NOISE_ORDER = 21


@dataclass
class OverlapODEResult:
    times: np.ndarray
    cross: np.ndarray  # (P, k, k_star) overlap with theta_star
    self_overlap: np.ndarray  # (P, k, k)
    method: str
    coeff_stderr: float = 0.0


class _GaussHermite:
    """Tensor Gauss-Hermite nodes for E over ((w, w_star), eps)."""

    def __init__(self, dim, order, noise_variance, noise_order):
        x, w = np.polynomial.hermite_e.hermegauss(order)
        w = w / w.sum()
        grids = np.meshgrid(*([x] * dim), indexing="ij")
        self.nodes = np.stack([g.ravel() for g in grids], axis=-1)  # (M, dim)
        wg = np.meshgrid(*([w] * dim), indexing="ij")
        self.weights = np.prod(np.stack([g.ravel() for g in wg], axis=-1), axis=-1)
        if noise_variance > 0:
            xe, we = np.polynomial.hermite_e.hermegauss(noise_order)
            we = we / we.sum()
            self.eps = np.sqrt(noise_variance) * np.repeat(xe, self.nodes.shape[0])
            self.nodes = np.tile(self.nodes, (noise_order, 1))
            self.weights = (we[:, None] * self.weights[None, :]).ravel()
        else:
            self.eps = np.zeros(self.nodes.shape[0])

    def expect(self, cov, fns):
        """E[fn(w, w_star, eps)] for each fn, with (w, w_star) ~ N(0, cov)."""
        w, v = np.linalg.eigh(cov)
        factor = v * np.sqrt(np.clip(w, 0.0, None))
        pts = self.nodes @ factor.T  # (M, k + k_star)
        return [np.tensordot(self.weights, fn(pts, self.eps), axes=(0, 0)) for fn in fns]


def _coeffs_gh(spec, quad, cov, k):
    def gamma_fn(pts, eps):
        return mdl.dxi_f_batch(spec, pts[:, :k], pts[:, k:], eps)

    def rfs_fn(pts, eps):
        return mdl.dwstar_f_batch(spec, pts[:, :k], pts[:, k:], eps)

    def sig2_fn(pts, eps):
        f = mdl.f_batch(spec, pts[:, :k], pts[:, k:], eps)
        return f[:, :, None] * f[:, None, :]

    return quad.expect(cov, [gamma_fn, rfs_fn, sig2_fn])


def _coeffs_mc(spec, rng, cov, k, n_nodes):
    w, v = np.linalg.eigh(cov)
    factor = v * np.sqrt(np.clip(w, 0.0, None))
    pts = rng.standard_normal((n_nodes, cov.shape[0])) @ factor.T
    eps = spec.noise_law.sample(rng, n_nodes)
    gam = mdl.dxi_f_batch(spec, pts[:, :k], pts[:, k:], eps)
    rfs = mdl.dwstar_f_batch(spec, pts[:, :k], pts[:, k:], eps)
    f = mdl.f_batch(spec, pts[:, :k], pts[:, k:], eps)
    sig2 = f[:, :, None] * f[:, None, :]
    return gam.mean(0), rfs.mean(0), sig2.mean(0)


def one_pass_overlap_ode(spec, tau_grid, tau_step=1e-3, gh_order=GH_ORDER,
                         method="gauss-hermite", mc_nodes=20000, seed=0,
                         refresh_every=1) -> OverlapODEResult:
    """Integrate the overlap ODEs of one-pass SGD on the tau grid.

    Coefficients are computed by Gauss-Hermite quadrature over the joint
    Gaussian (w, w_star) plus the noise law; if a quadrature evaluation goes
    non-finite the integrator falls back to Monte Carlo nodes and reports the
    sampling noise scale in ``coeff_stderr``.
    """
    k, ks = spec.k, spec.k_star
    lam = spec.regularizer.lam
    m = spec.init_law.cross_block.copy()
    q = spec.init_law.self_block.copy()
    sss = spec.init_law.star_block
    quad = _GaussHermite(k + ks, gh_order, spec.noise_law.variance, GH_NOISE_ORDER)
    rng = np.random.default_rng(seed)
    coeff_stderr = 0.0

    times = np.asarray(tau_grid.times if hasattr(tau_grid, "times") else tau_grid, dtype=float)
    out_cross = np.empty((len(times), k, ks))
    out_self = np.empty((len(times), k, k))
    out_cross[0], out_self[0] = m, q

    tau = 0.0
    coeffs = None
    steps_done = 0
    for i in range(1, len(times)):
        target = times[i]
        while tau < target - 1e-12:
            h = min(tau_step, target - tau)
            if coeffs is None or steps_done % refresh_every == 0:
                cov = np.block([[q, m], [m.T, sss]])
                cov = 0.5 * (cov + cov.T)
                if method == "gauss-hermite":
                    gam, rfs, sig2 = _coeffs_gh(spec, quad, cov, k)
                    if not all(np.all(np.isfinite(c)) for c in (gam, rfs, sig2)):
                        method = "mc"
                if method == "mc":
                    gam, rfs, sig2 = _coeffs_mc(spec, rng, cov, k, mc_nodes)
                    coeff_stderr = max(coeff_stderr, float(np.abs(sig2).max()) / np.sqrt(mc_nodes))
                coeffs = (gam, rfs, sig2)
            gam, rfs, sig2 = coeffs
            eta = float(spec.eta(tau))
            a = gam + lam * np.eye(k)
            dm = -eta * (a @ m + rfs @ sss)
            dq = -eta * (a @ q + rfs @ m.T + q @ a.T + m @ rfs.T) + eta**2 * sig2
            m = m + h * dm
            q = q + h * dq
            tau += h
            steps_done += 1
            coeffs = coeffs if refresh_every > 1 else None
        out_cross[i], out_self[i] = m, q

    if not np.all(np.isfinite(out_cross)) or not np.all(np.isfinite(out_self)):
        raise UnsupportedModelError("overlap ODE integration left the finite domain")
    return OverlapODEResult(times=times, cross=out_cross, self_overlap=out_self,
                            method=method, coeff_stderr=coeff_stderr)
