import numpy as np
import pytest

from dmft_sgd import (
    StructuralError,
    TimeGrid,
    UnsupportedModelError,
    linear_map,
    ridge_map,
    volterra_resolvent,
)
from dmft_sgd.analytic import resolve_inhomogeneous
from dmft_sgd.fixedpoint import SolveOptions, free_theta_kernels, solve
from dmft_sgd.mc import estimate_theta_kernels, estimate_xi_kernels

from conftest import make_spec

from test_mc import forcing_free_xi_kernels, white_theta_kernels


# ---------------------------------------------------------------------------
# resolvent

def test_resolvent_of_zero_is_zero():
    g = TimeGrid(T=1.0, delta=0.1)
    k = volterra_resolvent(np.zeros((g.n_points,) * 2), g)
    assert np.all(k.blocks == 0.0)


def test_resolvent_scalar_exponential():
    g = TimeGrid(T=1.0, delta=0.0025)
    a = np.tril(np.ones((g.n_points,) * 2), -1)
    k = volterra_resolvent(a, g)
    val = k.blocks[g.index_of(1.0), 0]
    assert abs(val - np.e) / np.e <= 0.005


def test_resolvent_matches_neumann_series():
    g = TimeGrid(T=1.0, delta=0.05)
    rng = np.random.default_rng(0)
    a = np.tril(rng.standard_normal((g.n_points,) * 2), -1)
    a *= 0.01 / (g.delta * np.abs(a).max())
    k = volterra_resolvent(a, g)
    # K = sum_{m>=1} delta^{m-1} (A o)^m, brute-force to machine tolerance
    term = a.copy()
    total = a.copy()
    for _ in range(200):
        term = g.delta * np.tril(a @ term, -1)
        total += term
        if np.abs(term).max() < 1e-18:
            break
    assert np.abs(k.blocks - total).max() <= 1e-10


def test_resolvent_identities_hold():
    g = TimeGrid(T=1.0, delta=0.05)
    rng = np.random.default_rng(1)
    a = np.tril(rng.standard_normal((g.n_points,) * 2), -1)
    k = volterra_resolvent(a, g)
    scale = max(np.abs(k.blocks).max(), 1.0)
    assert k.residual_left(a) <= 1e-10 * scale
    assert k.residual_right(a) <= 1e-10 * scale


def test_resolvent_rejects_non_causal():
    g = TimeGrid(T=0.2, delta=0.1)
    a = np.ones((3, 3))
    with pytest.raises(StructuralError):
        volterra_resolvent(a, g)


def test_resolve_inhomogeneous_solves_system():
    g = TimeGrid(T=1.0, delta=0.05)
    rng = np.random.default_rng(2)
    a = np.tril(rng.standard_normal((g.n_points,) * 2), -1) * 0.5
    b = rng.standard_normal(g.n_points)
    x = resolve_inhomogeneous(volterra_resolvent(a, g), b)
    resid = x - (b + g.delta * np.tril(a, -1) @ x)
    assert np.abs(resid).max() <= 1e-12


# ---------------------------------------------------------------------------
# linear map

def test_linear_map_gamma_identity_and_driver_free():
    g = TimeGrid(T=1.0, delta=0.05)
    theta = white_theta_kernels(g, rho=0.2)
    out_p = linear_map(make_spec(driver="poisson"), theta, grid=g)
    out_g = linear_map(make_spec(driver="gaussian"), theta, grid=g)
    assert np.all(out_p.gamma == 1.0)
    assert np.array_equal(out_p.c_f.blocks, out_g.c_f.blocks)
    assert np.array_equal(out_p.r_f_star, out_g.r_f_star)


def test_linear_map_small_learning_rate_limit():
    g = TimeGrid(T=1.0, delta=0.05)
    spec = make_spec(eta_schedule=1e-6)
    out = linear_map(spec, white_theta_kernels(g, rho=0.2), grid=g)
    assert np.abs(out.c_f.blocks).max() <= 1e-5
    assert np.abs(out.r_f_star + 1.0).max() <= 1e-4


def test_linear_map_rejects_wrong_family():
    g = TimeGrid(T=0.5, delta=0.05)
    theta = white_theta_kernels(g)
    with pytest.raises(UnsupportedModelError):
        linear_map(make_spec(activation="tanh"), theta, grid=g)
    with pytest.raises(UnsupportedModelError):
        linear_map(make_spec(teacher="tanh_noisy"), theta, grid=g)


def test_linear_map_against_monte_carlo():
    g = TimeGrid(T=1.0, delta=0.05)
    spec = make_spec()
    theta = white_theta_kernels(g, rho=0.3)
    an = linear_map(spec, theta, grid=g)
    mc = estimate_xi_kernels(spec, theta, 20000, seed=3)
    for name, a, b in [
        ("c_f", an.c_f.blocks, mc.c_f.blocks),
        ("r_f", an.r_f.blocks, mc.r_f.blocks),
        ("r_f_star", an.r_f_star, mc.r_f_star),
    ]:
        se = np.maximum(mc.stderr[name], 1e-12)
        z = np.abs(a - b) / se
        z[np.abs(a - b) == 0.0] = 0.0
        assert z.max() <= 4.0, f"{name}: max z = {z.max():.2f}"


def test_cbar_xi_equation_residual():
    g = TimeGrid(T=1.0, delta=0.05)
    spec = make_spec()
    _, aux = linear_map(spec, white_theta_kernels(g, rho=0.3), grid=g, return_aux=True)
    assert np.all(np.diag(aux.cbar_xi) >= 0.0)
    assert aux.cbar_xi_residual(spec.kappa_bar, g.delta) <= 1e-9


# ---------------------------------------------------------------------------
# ridge map

def test_ridge_map_unforced_exponentials():
    g = TimeGrid(T=1.0, delta=0.05)
    spec = make_spec()
    eta, gam, lam = 0.8, spec.gamma, spec.regularizer.lam
    out = ridge_map(spec, forcing_free_xi_kernels(g), grid=g)
    rate = eta * (gam + lam)
    t, s = np.meshgrid(g.times, g.times, indexing="ij")
    want_r = np.where(s < t, np.exp(-rate * (t - s)), 0.0)
    np.fill_diagonal(want_r, 0.0)
    tol = 2 * g.delta * rate
    assert np.abs(out.r_theta.blocks[:, :, 0, 0] - want_r).max() <= tol
    want_c = np.exp(-rate * (t + s)) * spec.init_law.self_block[0, 0]
    assert np.abs(out.c_theta.blocks[:, :, 0, 0] - want_c).max() <= tol


def test_ridge_map_time_zero_moments_exact():
    g = TimeGrid(T=1.0, delta=0.05)
    from conftest import correlated_init

    spec = make_spec(init_law=correlated_init(0.4))
    out = ridge_map(spec, forcing_free_xi_kernels(g), grid=g)
    assert out.c_theta.blocks[0, 0, 0, 0] == spec.init_law.self_block[0, 0]
    assert out.c_theta_star[0, 0, 0] == spec.init_law.cross_block[0, 0]
    assert np.array_equal(out.c_star_star, spec.init_law.star_block)


def test_ridge_map_against_monte_carlo():
    g = TimeGrid(T=1.0, delta=0.05)
    spec = make_spec()
    # realistic xi kernels from one analytic pass at the free state
    xi = linear_map(spec, free_theta_kernels(spec, g), grid=g)
    an = ridge_map(spec, xi, grid=g)
    mc = estimate_theta_kernels(spec, xi, 20000, seed=4)
    for name, a, b in [
        ("c_theta", an.c_theta.blocks, mc.c_theta.blocks),
        ("c_theta_star", an.c_theta_star, mc.c_theta_star),
        ("c_star_star", an.c_star_star, mc.c_star_star),
    ]:
        se = np.maximum(mc.stderr[name], 1e-12)
        z = np.abs(a - b) / se
        z[np.abs(a - b) == 0.0] = 0.0
        assert z.max() <= 4.0, f"{name}: max z = {z.max():.2f}"
    assert np.abs(an.r_theta.blocks - mc.r_theta.blocks).max() <= 1e-10


def test_analytic_fixed_point_response_identities():
    spec = make_spec()
    g = TimeGrid(T=2.0, delta=0.05)
    state, _ = solve(spec, g, SolveOptions(mode="analytic"))
    eta = spec.eta_on_grid(g)
    a = -eta[None, :] * state.r_theta.blocks[:, :, 0, 0]
    k = volterra_resolvent(a, g)
    scale = max(np.abs(k.blocks).max(), 1.0)
    assert k.residual_left(a) <= 1e-10 * scale
    assert k.residual_right(a) <= 1e-10 * scale
