import numpy as np
import pytest

from dmft_sgd import StructuralError, TimeGrid, TwoTimeKernel, psd_project
from dmft_sgd.kernels import (
    COVARIANCE,
    RESPONSE,
    DMFTState,
    ThetaKernels,
    XiKernels,
    load_kernel,
    load_state,
    save_kernel,
    save_state,
)


def test_grid_basics():
    g = TimeGrid(T=4.0, delta=0.05)
    assert g.N == 80
    assert g.n_points == 81
    assert g.times[0] == 0.0
    assert g.times[-1] == pytest.approx(4.0, abs=1e-12)
    assert g.index_of(2.0) == 40


def test_grid_rejects_bad_horizon():
    with pytest.raises(StructuralError):
        TimeGrid(T=1.0, delta=0.3)
    with pytest.raises(StructuralError):
        TimeGrid(T=-1.0, delta=0.1)


def _cov_kernel(grid, mat):
    return TwoTimeKernel.from_full_matrix(grid, 1, 1, mat, COVARIANCE)


def test_full_matrix_round_trip():
    g = TimeGrid(T=0.2, delta=0.1)
    rng = np.random.default_rng(0)
    blocks = rng.standard_normal((3, 3, 2, 2))
    ker = TwoTimeKernel(g, 2, 2, blocks, COVARIANCE)
    back = TwoTimeKernel.from_full_matrix(g, 2, 2, ker.full_matrix(), COVARIANCE)
    assert np.array_equal(back.blocks, blocks)


def test_psd_project_fixes_cone_and_is_idempotent():
    g = TimeGrid(T=0.1, delta=0.1)
    psd = _cov_kernel(g, np.array([[2.0, 0.5], [0.5, 1.0]]))
    out = psd_project(psd)
    assert np.abs(out.blocks - psd.blocks).max() <= 1e-12

    neg = _cov_kernel(g, np.diag([1.0, -0.1]))
    clipped = psd_project(neg)
    assert np.allclose(clipped.full_matrix(), np.diag([1.0, 0.0]), atol=1e-14)

    rng = np.random.default_rng(1)
    base = rng.standard_normal((5, 5))
    mat = base @ base.T
    pert = mat + 0.3 * (lambda a: 0.5 * (a + a.T))(rng.standard_normal((5, 5)))
    g5 = TimeGrid(T=0.5, delta=0.1)
    # grid has 6 points; embed the 5x5 exercise in a 6x6 matrix
    full = np.zeros((6, 6))
    full[:5, :5] = pert
    out = psd_project(_cov_kernel(g5, full))
    assert out.min_eigenvalue() >= -1e-10
    again = psd_project(out)
    assert np.abs(again.blocks - out.blocks).max() <= 1e-12


def test_psd_project_rejects_response_kernels():
    g = TimeGrid(T=0.1, delta=0.1)
    resp = TwoTimeKernel.zeros(g, 1, 1, RESPONSE)
    with pytest.raises(StructuralError):
        psd_project(resp)


def test_causality_flag():
    g = TimeGrid(T=0.2, delta=0.1)
    ker = TwoTimeKernel.zeros(g, 1, 1, RESPONSE)
    ker.blocks[2, 1, 0, 0] = 1.0
    assert ker.causality_ok()
    ker.blocks[1, 1, 0, 0] = 1e-300
    assert not ker.causality_ok()


def _random_state(seed=0):
    g = TimeGrid(T=0.3, delta=0.1)
    rng = np.random.default_rng(seed)
    p = g.n_points
    base = rng.standard_normal((p, p))
    c_theta = _cov_kernel(g, base @ base.T)
    r = np.tril(rng.standard_normal((p, p)), -1)
    theta = ThetaKernels(
        c_theta=c_theta,
        c_theta_star=rng.standard_normal((p, 1, 1)),
        c_star_star=np.array([[1.3]]),
        r_theta=TwoTimeKernel(g, 1, 1, r[:, :, None, None], RESPONSE),
    )
    base2 = rng.standard_normal((p, p))
    xi = XiKernels(
        c_f=_cov_kernel(g, base2 @ base2.T),
        r_f=TwoTimeKernel(g, 1, 1, np.tril(rng.standard_normal((p, p)), -1)[:, :, None, None], RESPONSE),
        r_f_star=rng.standard_normal((p, 1, 1)),
        gamma=rng.standard_normal((p, 1, 1)),
    )
    return DMFTState(theta=theta, xi=xi)


def test_kernel_container_round_trip_bit_exact(tmp_path):
    g = TimeGrid(T=0.3, delta=0.1)
    rng = np.random.default_rng(2)
    mat = rng.standard_normal((4, 4))
    ker = _cov_kernel(g, mat + mat.T)
    path = tmp_path / "kernel.bin"
    save_kernel(path, ker)
    back = load_kernel(path)
    assert back.kind == COVARIANCE
    assert back.grid.same_as(g)
    assert np.array_equal(back.blocks, ker.blocks)


def test_state_container_round_trip_bit_exact(tmp_path):
    state = _random_state()
    path = tmp_path / "state.bin"
    save_state(path, state)
    back = load_state(path)
    for name in ("c_theta", "r_theta", "c_f", "r_f"):
        assert np.array_equal(getattr(back, name).blocks, getattr(state, name).blocks)
    assert np.array_equal(back.c_theta_star, state.c_theta_star)
    assert np.array_equal(back.c_star_star, state.c_star_star)
    assert np.array_equal(back.r_f_star, state.r_f_star)
    assert np.array_equal(back.gamma, state.gamma)


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a kernel container")
    with pytest.raises(StructuralError):
        load_kernel(path)
