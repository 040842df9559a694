import math

import numpy as np
import pytest

from bmsflow.errors import DegenerateSpectrum, MarginalEigenvalue, NoConvergence, SingularJacobian
from bmsflow.model import (
    CubicCoefficients,
    ModelParams,
    RGState,
    default_remainder_model,
    householder,
    zero_remainder_model,
)
from bmsflow.spectral import (
    approximate_ir_point,
    eigen,
    exponents,
    fd_jacobian,
    gaussian_point,
    ir_fixed_point,
    jacobian_fd,
    manifold_tangents,
    newton_fixed_point,
    spectral_report,
)


def test_newton_at_simplified_fixed_point(params, zero_rem):
    start = approximate_ir_point(params)
    fp = newton_fixed_point(start, params, zero_rem)
    assert fp.g == start.g and fp.mu == 0 and np.all(fp.R == 0)


def test_newton_from_small_start(params, zero_rem):
    gs = params.derived.g_star_bar
    fp = newton_fixed_point(RGState(gs / 10, 0.0, np.zeros(3)), params, zero_rem)
    assert min(abs(fp.g), abs(fp.g - gs)) < 1e-12
    assert abs(fp.mu) < 1e-12 and np.max(np.abs(fp.R)) < 1e-12


def test_default_fixed_point_scaling():
    """|g_* - g_star_bar| grows linearly with the remainder strength."""
    p = ModelParams()
    shifts = []
    for s in (0.25, 0.5, 1.0):
        c = CubicCoefficients(c_g=s, c_gR=0.5 * s, c_mu=s, c_muR=0.5 * s, c_R=s)
        rem = default_remainder_model(p, c)
        fp = ir_fixed_point(p, rem)
        assert np.max(np.abs(fp.as_vector() - np.r_[fp.g, fp.mu, fp.R])) == 0
        shifts.append(abs(fp.g - p.derived.g_star_bar) / s)
    gs2 = p.derived.g_star_bar ** 2
    assert all(x < 5 * gs2 for x in shifts)
    assert max(shifts) / min(shifts) < 1.5


def test_ir_fixed_point_is_a_root(params, rem):
    from bmsflow.model import bms_step_vector
    fp = ir_fixed_point(params, rem)
    x = fp.as_vector()
    assert np.max(np.abs(bms_step_vector(x, params, rem) - x)) < 1e-12


def test_jacobian_at_gaussian_point(params, zero_rem):
    J = jacobian_fd(gaussian_point(params), params, zero_rem)
    expected = np.zeros((5, 5))
    expected[0, 0] = 2**0.1
    expected[1, 1] = 2**1.55
    expected[2:, 2:] = 0.5 * householder(3)
    assert np.max(np.abs(J - expected)) < 1e-6


def test_jacobian_at_ir_point(params, zero_rem):
    J = jacobian_fd(approximate_ir_point(params), params, zero_rem)
    assert J[0, 0] == pytest.approx(2 - 2**0.1, abs=1e-6)


def test_mu_row_is_linear(params, zero_rem):
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = RGState(rng.uniform(0, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1, 3))
        J = jacobian_fd(x, params, zero_rem)
        row = np.zeros(5)
        row[1] = params.derived.lambda_mu
        assert np.max(np.abs(J[1] - row)) < 1e-8


def test_richardson_ratio(params, rem):
    x = ir_fixed_point(params, rem)
    big = jacobian_fd(x, params, rem, rel_step=1e-2)
    half = jacobian_fd(x, params, rem, rel_step=5e-3)
    ref = jacobian_fd(x, params, rem, rel_step=1e-4)
    ratio = np.linalg.norm(big - ref) / np.linalg.norm(half - ref)
    assert 3.5 < ratio < 4.5


def test_eigen_trivial_cases(params):
    lam, V = eigen(np.eye(4))
    assert np.allclose(lam, 1)
    diag = [2**0.1, 2**1.55, 0.5, 0.5, 0.5]
    lam, _ = eigen(np.diag(diag))
    assert np.allclose(np.sort(lam.real), np.sort(diag), atol=1e-15)


def test_eigen_constructed_matrix():
    rng = np.random.default_rng(42)
    D = np.array([3.0, -1.7, 0.9, 0.4, -0.2])
    P = rng.normal(size=(5, 5))
    A = P @ np.diag(D) @ np.linalg.inv(P)
    lam, V = eigen(A)
    assert np.allclose(np.sort(lam.real), np.sort(D), atol=1e-8)
    assert np.max(np.abs(lam.imag)) < 1e-8
    assert np.max(np.abs(A @ V - V * lam)) < 1e-9
    assert np.all(np.diff(np.abs(lam)) <= 0)


def test_eigen_rejects_bad_input():
    with pytest.raises(ValueError):
        eigen(np.ones((2, 3)))


def test_eigen_no_convergence():
    # a zero tolerance is unreachable for a generic matrix in floating point
    A = np.random.default_rng(1).normal(size=(4, 4))
    with pytest.raises(NoConvergence):
        eigen(A, tol=0.0, max_refine=1)


@pytest.mark.parametrize("eps", [0.01, 0.05, 0.1])
def test_simplified_exponents(eps):
    p = ModelParams(epsilon=eps)
    rep = spectral_report(approximate_ir_point(p), p, zero_remainder_model(p))
    assert rep.nu == pytest.approx(2 / (3 + eps), abs=1e-9)
    omega = -math.log(2 - 2**eps) / math.log(2)
    assert rep.omega_corr == pytest.approx(omega, rel=1e-6)
    # ratio tends to 1 linearly in eps: omega/eps = 1 + (ln 2) eps + O(eps^2)
    assert rep.omega_corr / eps == pytest.approx(1 + math.log(2) * eps, abs=2 * eps**2 + 1e-6)


def test_nu_independent_of_L():
    nus = []
    for L in (2.0, 4.0):
        p = ModelParams(L=L)
        nus.append(spectral_report(approximate_ir_point(p), p, zero_remainder_model(p)).nu)
    assert nus[0] == pytest.approx(nus[1], abs=1e-9)
    assert nus[0] == pytest.approx(0.6451612903, abs=1e-9)


def test_spectrum_anchors(params, zero_rem):
    g_rep = spectral_report(gaussian_point(params), params, zero_rem)
    lam = g_rep.eigenvalues
    for target in (2**0.1, 2**1.55):
        assert np.min(np.abs(lam - target)) < 1e-6
    assert len(lam) == 2 + params.d_R
    ir = spectral_report(approximate_ir_point(params), params, zero_rem)
    for target in (2 - 2**0.1, 2**1.55):
        assert np.min(np.abs(ir.eigenvalues - target)) < 1e-6
    assert ir.n_expanding == 1


def test_exponents_degenerate():
    V = np.eye(3, dtype=complex)
    with pytest.raises(DegenerateSpectrum):
        exponents(np.array([2.0, 2.0, 0.5], dtype=complex), V, 2.0)


def test_manifold_tangents(params, zero_rem):
    up, down = manifold_tangents(gaussian_point(params), params, zero_rem)
    assert up.shape == (5, 2) and down.shape == (5, 3)
    assert np.allclose(np.abs(up[:2]).max(axis=0), 1) and np.allclose(up[2:], 0, atol=1e-9)
    assert np.allclose(down[:2], 0, atol=1e-9)
    up, down = manifold_tangents(approximate_ir_point(params), params, zero_rem)
    assert up.shape[1] == 1 and abs(up[1, 0]) == pytest.approx(1.0, abs=1e-9)


def test_manifold_tangents_marginal():
    p = ModelParams(epsilon=1e-10)
    with pytest.raises(MarginalEigenvalue):
        manifold_tangents(gaussian_point(p), p, zero_remainder_model(p))


@pytest.mark.parametrize("scale", [0.25, 0.5, 1.0])
def test_default_remainder_one_expanding(scale):
    p = ModelParams()
    c = CubicCoefficients(c_g=scale, c_gR=0.5 * scale, c_mu=scale, c_muR=0.5 * scale, c_R=scale)
    rem = default_remainder_model(p, c)
    up, _ = manifold_tangents(ir_fixed_point(p, rem), p, rem)
    assert up.shape[1] == 1


def test_report_serializes(params, rem):
    d = spectral_report(approximate_ir_point(params), params, rem).to_dict()
    assert set(d) == {"fixed_point", "eigenvalues", "exponents", "classification"}
    assert d["classification"]["expanding"] == 1


def test_d_R_zero_spectrum():
    p = ModelParams(d_R=0)
    rep = spectral_report(gaussian_point(p), p, zero_remainder_model(p))
    assert len(rep.eigenvalues) == 2


def test_singular_jacobian_reported():
    p = ModelParams(d_R=0)
    from bmsflow.model import RemainderModel
    # xi_mu cancels the linear mu term, so F(x) = step(x) - x is flat in mu
    rem = RemainderModel(
        xi_g=lambda g, mu, R: 0 * np.asarray(g),
        xi_mu=lambda g, mu, R: (1 - p.derived.lambda_mu) * np.asarray(mu) + 1e-3,
        xi_R=lambda g, mu, R: np.zeros(np.shape(g) + (0,)),
        L_op=lambda g, mu: np.zeros((0, 0)), d_R=0)
    with pytest.raises(SingularJacobian):
        newton_fixed_point(RGState(0.05, 0.0, []), p, rem)


def test_fd_jacobian_of_linear_map():
    A = np.array([[1.0, 2.0], [-3.0, 0.5]])
    J = fd_jacobian(lambda x: A @ x, np.array([0.3, -0.7]))
    assert np.allclose(J, A, atol=1e-9)
