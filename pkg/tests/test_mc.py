import numpy as np
import pytest

from dmft_sgd import TimeGrid, TwoTimeKernel
from dmft_sgd.kernels import COVARIANCE, RESPONSE, ThetaKernels, XiKernels
from dmft_sgd.mc import (
    estimate_theta_kernels,
    estimate_xi_kernels,
    sample_theta_trajectory,
    sample_xi_trajectory,
)
from dmft_sgd.sampling import derived_seed

from conftest import make_spec


def white_theta_kernels(grid, rho=0.0, memoryless=False):
    """Kernels of w^t = rho w* + sqrt(1-rho^2) g_t with g_t iid (PSD jointly)."""
    p = grid.n_points
    blocks = np.full((p, p, 1, 1), rho**2)
    blocks[np.arange(p), np.arange(p)] = 1.0
    r = np.zeros((p, p, 1, 1))
    if not memoryless:
        t, s = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        r[s < t] = 1.0
    return ThetaKernels(
        c_theta=TwoTimeKernel(grid, 1, 1, blocks, COVARIANCE),
        c_theta_star=np.full((p, 1, 1), rho),
        c_star_star=np.array([[1.0]]),
        r_theta=TwoTimeKernel(grid, 1, 1, r, RESPONSE),
    )


def forcing_free_xi_kernels(grid, gamma_val=1.0):
    """C_f = 0, R_f = 0, R_f_star = 0, Gamma = gamma_val * Id."""
    p = grid.n_points
    return XiKernels(
        c_f=TwoTimeKernel.zeros(grid, 1, 1, COVARIANCE),
        r_f=TwoTimeKernel.zeros(grid, 1, 1, RESPONSE),
        r_f_star=np.zeros((p, 1, 1)),
        gamma=np.full((p, 1, 1), gamma_val),
    )


# ---------------------------------------------------------------------------
# xi-side trajectories

def test_xi_starts_at_w():
    grid = TimeGrid(T=0.5, delta=0.05)
    spec = make_spec()
    sample = sample_xi_trajectory(white_theta_kernels(grid), spec, seed=0)
    assert sample.xi_path[0, 0] == sample.noise["w_path"][0, 0]


def test_memoryless_response_means_xi_equals_w():
    grid = TimeGrid(T=0.5, delta=0.05)
    spec = make_spec()
    sample = sample_xi_trajectory(white_theta_kernels(grid, memoryless=True), spec, seed=1)
    assert np.array_equal(sample.xi_path, sample.noise["w_path"])
    assert np.all(sample.r_f == 0.0)


def test_linear_rfstar_matches_direct_recursion():
    grid = TimeGrid(T=1.0, delta=0.05)  # N = 20
    spec = make_spec()
    theta = white_theta_kernels(grid, rho=0.3)
    sample = sample_xi_trajectory(theta, spec, seed=2)
    eta = spec.eta_on_grid(grid)
    r_theta = theta.r_theta.blocks[:, :, 0, 0]
    z = sample.noise["z"]
    # for f = xi - w_star: r_f*^t = -sum_r (eta_r/kappa) R[t,r] r_f*^r z^r - 1
    want = np.empty(grid.n_points)
    want[0] = -1.0
    for t in range(1, grid.n_points):
        acc = sum(eta[r] / spec.kappa_bar * r_theta[t, r] * want[r] * z[r] for r in range(t))
        want[t] = -acc - 1.0
    assert sample.r_f_star[:, 0, 0] == pytest.approx(want, abs=1e-12)


def test_rf_strictly_causal():
    grid = TimeGrid(T=0.5, delta=0.05)
    spec = make_spec(loss="huber", activation="tanh", teacher="tanh_noisy")
    sample = sample_xi_trajectory(white_theta_kernels(grid), spec, seed=3)
    p = grid.n_points
    t, s = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    assert np.all(sample.r_f[s >= t] == 0.0)


# ---------------------------------------------------------------------------
# theta-side trajectories

def test_theta_constant_when_unforced():
    grid = TimeGrid(T=0.5, delta=0.05)
    spec = make_spec(eta_schedule=0.0)
    xi = forcing_free_xi_kernels(grid)
    sample = sample_theta_trajectory(xi, spec, seed=4)
    assert np.allclose(sample.theta_path, sample.theta_path[0], atol=0)
    p = grid.n_points
    t, s = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    assert np.all(sample.r_theta[(s < t)][:, 0, 0] == 1.0)
    assert np.all(sample.r_theta[s >= t] == 0.0)


def test_r_theta_first_step_identity_any_state():
    grid = TimeGrid(T=0.5, delta=0.05)
    rng = np.random.default_rng(5)
    p = grid.n_points
    c_f = rng.standard_normal((p, p))
    xi = XiKernels(
        c_f=TwoTimeKernel(grid, 1, 1, (c_f @ c_f.T)[:, :, None, None] / p, COVARIANCE),
        r_f=TwoTimeKernel(grid, 1, 1, np.tril(rng.standard_normal((p, p)), -1)[:, :, None, None],
                          RESPONSE),
        r_f_star=rng.standard_normal((p, 1, 1)),
        gamma=rng.standard_normal((p, 1, 1)),
    )
    sample = sample_theta_trajectory(xi, make_spec(), seed=6)
    idx = np.arange(p - 1)
    assert np.all(sample.r_theta[idx + 1, idx, 0, 0] == 1.0)


def test_theta_decay_matches_exponential():
    # Gamma = Id, no memory, no noise: theta^t = theta0 * prod(1 - delta eta (gamma + lambda))
    grid = TimeGrid(T=1.0, delta=0.0125)
    spec = make_spec()
    eta, gam, lam = 0.8, spec.gamma, spec.regularizer.lam
    xi = forcing_free_xi_kernels(grid)
    sample = sample_theta_trajectory(xi, spec, seed=7)
    theta0 = sample.theta_path[0, 0]
    prod = theta0 * (1 - grid.delta * eta * (gam + lam)) ** np.arange(grid.n_points)
    assert sample.theta_path[:, 0] == pytest.approx(prod, rel=1e-12)
    exact = theta0 * np.exp(-eta * (gam + lam) * grid.times)
    rel_gap = np.abs(sample.theta_path[:, 0] - exact).max() / abs(theta0)
    assert rel_gap <= 2 * grid.delta * (gam + lam) * eta


# ---------------------------------------------------------------------------
# estimators

def test_gamma_estimate_is_identity_for_linear_model():
    grid = TimeGrid(T=0.5, delta=0.05)
    est = estimate_xi_kernels(make_spec(), white_theta_kernels(grid), 50, seed=8)
    assert np.all(est.gamma == 1.0)
    assert np.all(est.stderr["gamma"] == 0.0)


def test_estimator_mean_linearity_and_seed_splitting():
    grid = TimeGrid(T=0.5, delta=0.05)
    spec = make_spec(loss="huber", activation="tanh", teacher="tanh_noisy")
    theta = white_theta_kernels(grid, rho=0.2)
    est = estimate_xi_kernels(spec, theta, 2, seed=9, project=False)

    singles = [sample_xi_trajectory(theta, spec, derived_seed(9, m)) for m in range(2)]
    rf_mean = (singles[0].r_f + singles[1].r_f) / 2
    assert np.array_equal(est.r_f.blocks, rf_mean)
    rfs_mean = (singles[0].r_f_star + singles[1].r_f_star) / 2
    assert np.array_equal(est.r_f_star, rfs_mean)

    # C_f equals the averaged outer product of the recomputed increment sums
    eta = spec.eta_on_grid(grid)
    from dmft_sgd.model import f_batch

    phis = []
    for s in singles:
        f_vals = f_batch(spec, s.xi_path, s.noise["w_star"], s.noise["eps"])
        incr = (eta[:-1] / spec.kappa_bar)[:, None] * f_vals[:-1] * s.noise["z"][:, None]
        phi = np.zeros((grid.n_points, 1))
        phi[1:] = np.cumsum(incr, axis=0)
        phis.append(phi)
    cf_mean = (np.einsum("ti,sj->tsij", phis[0], phis[0])
               + np.einsum("ti,sj->tsij", phis[1], phis[1])) / 2
    cf_mean = 0.5 * (cf_mean + cf_mean.transpose(1, 0, 3, 2))
    assert np.allclose(est.c_f.blocks, cf_mean, atol=1e-15)


def test_free_state_theta_kernels():
    grid = TimeGrid(T=0.5, delta=0.05)
    spec = make_spec(eta_schedule=0.0)
    xi = forcing_free_xi_kernels(grid)
    est = estimate_theta_kernels(spec, xi, 400, seed=10)
    s00 = spec.init_law.self_block[0, 0]
    assert np.abs(est.c_theta.blocks - est.c_theta.blocks[0, 0]).max() <= 1e-12
    z = abs(est.c_theta.blocks[0, 0, 0, 0] - s00) / est.stderr["c_theta"][0, 0, 0, 0]
    assert z <= 3.5
    zs = abs(est.c_star_star[0, 0] - spec.init_law.star_block[0, 0])
    assert zs <= 3 * max(est.stderr["c_star_star"][0, 0], 1e-12)
    p = grid.n_points
    t, s = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
    assert np.all(est.r_theta.blocks[(s < t)][:, 0, 0] == 1.0)


def test_covariance_symmetry_and_cf_origin():
    grid = TimeGrid(T=0.5, delta=0.05)
    spec = make_spec()
    est = estimate_xi_kernels(spec, white_theta_kernels(grid), 200, seed=11)
    assert est.c_f.symmetry_error() == 0.0
    assert np.all(est.c_f.blocks[0, 0] == 0.0)
    assert est.c_f.min_eigenvalue() >= -1e-10
    assert est.r_f.causality_ok()


@pytest.mark.parametrize("driver", ["poisson", "gaussian"])
def test_ito_isometry(driver):
    grid = TimeGrid(T=1.0, delta=0.05)
    spec = make_spec(driver=driver, loss="huber", activation="tanh", teacher="tanh_noisy")
    theta = white_theta_kernels(grid, rho=0.2)
    n_samples = 4000
    from dmft_sgd.model import f_batch

    stats = []
    for m in range(n_samples):
        s = sample_xi_trajectory(theta, spec, derived_seed(12, m), want_responses=False)
        f_vals = f_batch(spec, s.xi_path[:-1], s.noise["w_star"], s.noise["eps"])[:, 0]
        zbar = s.noise["z"] - grid.delta * spec.kappa_bar
        mart = float(np.sum(f_vals * zbar))
        qv = grid.delta * spec.kappa_bar * float(np.sum(f_vals**2))
        stats.append(mart**2 - qv)
    stats = np.asarray(stats)
    stderr = stats.std(ddof=1) / np.sqrt(n_samples)
    assert abs(stats.mean()) <= 5 * stderr


def test_linear_kernels_driver_independent():
    grid = TimeGrid(T=1.0, delta=0.05)
    theta = white_theta_kernels(grid, rho=0.3)
    est_p = estimate_xi_kernels(make_spec(driver="poisson"), theta, 20000, seed=13)
    est_g = estimate_xi_kernels(make_spec(driver="gaussian"), theta, 20000, seed=13)
    for name, a, b in [
        ("c_f", est_p.c_f.blocks, est_g.c_f.blocks),
        ("r_f", est_p.r_f.blocks, est_g.r_f.blocks),
        ("r_f_star", est_p.r_f_star, est_g.r_f_star),
        ("gamma", est_p.gamma, est_g.gamma),
    ]:
        se = np.sqrt(est_p.stderr[name] ** 2 + est_g.stderr[name] ** 2)
        z = np.abs(a - b) / np.maximum(se, 1e-12)
        z[np.abs(a - b) == 0.0] = 0.0
        assert z.max() <= 3.0, f"{name} differs across drivers: max z={z.max()}"


def test_gamma_estimate_bounded_by_model_constant():
    # |D_xi f| <= |L''| max|sigma'|^2 + |L'| max|sigma''| <= 1 + 0.77 for tanh/Huber(1)
    grid = TimeGrid(T=0.5, delta=0.05)
    spec = make_spec(loss="huber", activation="tanh", teacher="tanh_noisy")
    est = estimate_xi_kernels(spec, white_theta_kernels(grid, rho=0.2), 500, seed=14)
    assert np.abs(est.gamma).max() <= 2.0
