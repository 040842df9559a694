import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fit_rate
from bmsflow.errors import (
    InvalidParams,
    MaxItersExceeded,
    NoContraction,
    OmegaOutOfDomain,
    SingularLinearization,
)
from bmsflow.model import (
    ModelParams,
    RemainderModel,
    bms_step_vector,
    f_simplified,
    linear_coefficient_A,
    zero_remainder_model,
)
from bmsflow.orbit import (
    DeviationSequence,
    SolverConfig,
    Trajectory,
    auto_tail_pad,
    build_backbone,
    extend_window,
    picard_solve,
    resum_dg,
    resum_mu,
    resum_R,
    residual_profile,
    residuals,
    solve_heteroclinic,
    solve_linear_dg,
    weighted_norm,
)
from bmsflow.spectral import ir_fixed_point, jacobian_fd, eigen

mpmath.mp.dps = 40


def table_model(d_R, xi_g=None, xi_mu=None, xi_R=None, Lop=None):
    """Remainder whose xi values are fixed arrays indexed by site (for batch calls)."""

    def pick(table, shape):
        def fn(g, mu, R):
            g = np.asarray(g)
            out = np.zeros(g.shape + shape)
            if table is None:
                return out
            table_arr = np.asarray(table, dtype=float)
            if table_arr.ndim > len(shape) and table_arr.shape[0] != g.size:
                return out  # single-site closure calls see no source
            return out + table_arr
        return fn

    L = Lop if Lop is not None else 0.5 * np.eye(d_R)
    return RemainderModel(pick(xi_g, ()), pick(xi_mu, ()), pick(xi_R, (d_R,)),
                          lambda g, mu: L, d_R)


# ---------------------------------------------------------------- backbone

def test_backbone_example(params):
    bb = build_backbone(0.25, -5, 5, params)
    gs = params.derived.g_star_bar
    assert bb.at(0) == 0.25 * gs
    assert bb.at(0) == pytest.approx(0.0225357, abs=1e-7)
    lg = mpmath.mpf(2) ** mpmath.mpf("0.1")
    a = mpmath.log(2)
    x0 = mpmath.mpf(bb.at(0))
    fwd = lg * x0 - lg**2 * a * x0**2
    back = (lg - mpmath.sqrt(lg**2 * (1 - 4 * a * x0))) / (2 * lg**2 * a)
    assert bb.at(1) == pytest.approx(float(fwd), rel=1e-14)
    assert bb.at(-1) == pytest.approx(float(back), rel=1e-14)
    assert bb.at(-1) < bb.at(0) < bb.at(1)
    assert np.max(np.abs(f_simplified(bb.g_bar[:-1], params) - bb.g_bar[1:])) < 1e-12


@settings(max_examples=50, deadline=None)
@given(omega0=st.floats(1e-3, 0.5, exclude_max=True), n=st.integers(1, 150))
def test_backbone_invariants(omega0, n):
    p = ModelParams()
    bb = build_backbone(omega0, -n, n, p)
    gs = p.derived.g_star_bar
    assert np.all(bb.g_bar > 0) and np.all(bb.g_bar < gs)
    assert np.all(np.diff(bb.g_bar) > 0)
    assert bb.at(0) == omega0 * gs
    assert np.max(np.abs(f_simplified(bb.g_bar[:-1], p) - bb.g_bar[1:])) < 1e-12


def test_backbone_vanishes_with_omega(params):
    peaks = [build_backbone(w, -20, 20, params).g_bar.max() for w in (1e-2, 1e-4, 1e-6)]
    assert peaks[0] > peaks[1] > peaks[2]
    assert peaks[2] < 1e-5 * params.derived.g_star_bar * 10


def test_backbone_ir_rate(params):
    bb = build_backbone(0.25, 0, 400, params)
    gs = params.derived.g_star_bar
    dist = gs - bb.g_bar
    A = linear_coefficient_A(gs, params)
    assert fit_rate(dist[200:300]) == pytest.approx(A, rel=1e-4)
    C = np.max(dist / A ** np.arange(401.0))
    assert dist[-1] <= C * A**400


def test_backbone_domain(params):
    with pytest.raises(OmegaOutOfDomain):
        build_backbone(0.6, -5, 5, params)
    with pytest.raises(OmegaOutOfDomain):
        build_backbone(0.0, -5, 5, params)
    build_backbone(0.6, -5, 5, params, strict=False)
    with pytest.raises(OmegaOutOfDomain):
        build_backbone(1.0, -5, 5, params, strict=False)
    with pytest.raises(InvalidParams):
        build_backbone(0.25, 1, 5, params)


# ---------------------------------------------------------------- resummations

def test_resum_mu_zero_source(params):
    bb = build_backbone(0.25, -30, 30, params)
    seq = DeviationSequence.zeros(-30, 30, 2)
    assert np.all(resum_mu(seq, bb, params, table_model(2)) == 0)


def test_resum_mu_constant_source(params):
    bb = build_backbone(0.25, -30, 30, params)
    seq = DeviationSequence.zeros(-30, 30, 2)
    c = 0.37
    mu = resum_mu(seq, bb, params, table_model(2, xi_mu=c))
    lam = params.derived.lambda_mu
    expected = -c * lam**-1 / (1 - lam**-1)
    assert np.allclose(mu, expected, rtol=1e-14, atol=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_resum_mu_identity_random_source(seed):
    p = ModelParams()
    rng = np.random.default_rng(seed)
    bb = build_backbone(0.25, -40, 40, p)
    xi = rng.normal(size=81)
    mu = resum_mu(DeviationSequence.zeros(-40, 40, 1), bb, p, table_model(1, xi_mu=xi))
    lam = p.derived.lambda_mu
    assert np.max(np.abs(mu[1:] - lam * mu[:-1] - xi[:-1])) < 1e-12


def test_resum_R_zero_and_constant(params):
    bb = build_backbone(0.25, -30, 30, params)
    seq = DeviationSequence.zeros(-30, 30, 3)
    assert np.all(resum_R(seq, bb, params, table_model(3)) == 0)
    v = np.array([0.1, -0.2, 0.3])
    gamma = 0.4
    R = resum_R(seq, bb, params, table_model(3, xi_R=v, Lop=gamma * np.eye(3)))
    assert np.allclose(R, v / (1 - gamma), rtol=1e-14, atol=1e-16)


def test_resum_R_identity(params):
    rng = np.random.default_rng(5)
    bb = build_backbone(0.25, -40, 40, params)
    xi = rng.normal(size=(81, 3))
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    rem = table_model(3, xi_R=xi, Lop=0.5 * Q)
    R = resum_R(DeviationSequence.zeros(-40, 40, 3), bb, params, rem)
    assert np.max(np.abs(R[1:] - R[:-1] @ (0.5 * Q).T - xi[:-1])) < 1e-12


def test_resum_dg_zero(params):
    bb = build_backbone(0.25, -30, 30, params)
    seq = DeviationSequence.zeros(-30, 30, 1)
    assert np.all(resum_dg(seq, bb, params, table_model(1)) == 0)


def test_resum_dg_impulse(params):
    bb = build_backbone(0.25, -30, 30, params)
    b = 1e-3
    xi = np.zeros(61)
    xi[30] = b
    dg = resum_dg(DeviationSequence.zeros(-30, 30, 1), bb, params, table_model(1, xi_g=xi))
    A = linear_coefficient_A(bb.g_bar, params)
    for n in range(-30, 31):
        i = n + 30
        if n <= 0:
            assert dg[i] == 0.0
        else:
            # dg_n = b * prod_{k=1}^{n-1} A_k
            assert dg[i] == pytest.approx(b * np.prod(A[31:i]), rel=1e-13)


def test_resum_dg_identity_and_uv_decay(params, rem):
    bb = build_backbone(0.25, -150, 150, params)
    rng = np.random.default_rng(2)
    seq = DeviationSequence(-150, 150, 1e-4 * rng.normal(size=301), 1e-4 * rng.normal(size=301),
                            1e-4 * rng.normal(size=(301, 3)))
    dg = resum_dg(seq, bb, params, rem)
    A = linear_coefficient_A(bb.g_bar, params)
    lg = params.derived.lambda_g
    B = -lg * lg * params.a * seq.dg**2 + rem.xi_g(bb.g_bar + seq.dg, seq.mu, seq.R)
    assert np.max(np.abs(dg[1:] - A[:-1] * dg[:-1] - B[:-1])) < 1e-12
    assert dg[150] == 0.0
    # smooth source: decay towards n_min at a rate no slower than max 1/A_k
    smooth = resum_dg(DeviationSequence.zeros(-150, 150, 3), bb, params, rem)
    rate = fit_rate(smooth[:60][::-1])
    assert rate < 1
    assert rate <= np.max(1 / A[:150]) * (1 + 1e-3)


def test_linear_dg_singular():
    with pytest.raises(SingularLinearization):
        solve_linear_dg(np.array([1.0, 0.0, 1.0]), np.ones(3), 1)


# ---------------------------------------------------------------- Picard solve

def test_zero_remainder_returns_backbone(params):
    zr = zero_remainder_model(params)
    sol = solve_heteroclinic(0.25, -50, 50, params, zr)
    assert sol.diagnostics.iterations_used == 1
    assert np.all(sol.deviations.dg == 0) and np.all(sol.mu == 0) and np.all(sol.R == 0)
    assert np.array_equal(sol.g, sol.backbone.g_bar)


def test_default_solution_residuals(solution, params, rem):
    res = residuals(solution.trajectory(), params, rem)
    assert res["g"] < 1e-10 and res["mu"] < 1e-10 and res["R"] < 1e-10
    assert res["dg0"] == 0.0
    assert solution.deviations.dg[200] == 0.0


def test_forward_iteration_reproduces_solution(solution, params, rem):
    X = np.column_stack([solution.g, solution.mu, solution.R])
    steps = 8
    growth = params.derived.lambda_mu
    for start in range(0, len(X) - steps, 13):
        x = X[start]
        for k in range(1, steps + 1):
            x = bms_step_vector(x, params, rem)
            # one-step defects of order 1e-14 are amplified by lambda_mu per step
            tol = 1e-13 * growth ** (k - 1)
            assert np.max(np.abs(x - X[start + k])) < tol


def test_local_uniqueness_two_guesses(params, rem, solution):
    rng = np.random.default_rng(11)
    amp = params.derived.g_star_bar ** 2
    size = 401
    guess = DeviationSequence(-200, 200, amp * rng.uniform(-1, 1, size),
                              amp * rng.uniform(-1, 1, size), amp * rng.uniform(-1, 1, (size, 3)))
    other = solve_heteroclinic(0.25, -200, 200, params, rem, initial=guess)
    diff = DeviationSequence(-200, 200, other.deviations.dg - solution.deviations.dg,
                             other.mu - solution.mu, other.R - solution.R)
    assert weighted_norm(diff, solution.backbone, (1, 2, 3)) < 1e-8


def test_contraction_ratios(solution):
    ratios = np.array(solution.diagnostics.contraction_ratio_estimates)
    assert np.all(ratios[:-2] < 1)
    late = ratios[2:8]
    assert np.max(late) / np.min(late) < 2.0


def test_boundary_conditions(solution):
    n = solution.n
    assert solution.deviations.dg[n == 0][0] == 0.0
    gs = ModelParams().derived.g_star_bar
    assert np.max(np.abs(solution.mu[n >= 0])) < gs**2
    assert np.max(np.linalg.norm(solution.R[n <= 0], axis=1)) < gs**3


def test_weighted_norms_uniform(solution):
    gb = solution.backbone.g_bar
    parts = [np.abs(solution.deviations.dg) / gb, np.abs(solution.mu) / gb**2,
             np.linalg.norm(solution.R, axis=1) / gb**3]
    for w in parts:
        assert np.max(w) < 10
        # no growth towards the ultraviolet end
        assert w[0] <= 1.01 * w[100] + 1e-12


def test_quadratic_dg_weight_blows_up(solution):
    """With the anchor dg_0 = 0 the deviation scales like g_bar itself in the UV."""
    gb = solution.backbone.g_bar
    ratio = np.abs(solution.deviations.dg[:50]) / gb[:50]
    assert np.max(ratio) / np.min(ratio) < 1.01
    assert np.abs(solution.deviations.dg[0]) / gb[0] ** 2 > 1e4


def test_limits(params, rem):
    sol = solve_heteroclinic(0.25, -400, 400, params, rem)
    fp = ir_fixed_point(params, rem)
    end = np.r_[sol.g[-1], sol.mu[-1], sol.R[-1]]
    assert np.max(np.abs(end - fp.as_vector())) < 1e-8
    start = np.r_[sol.g[0], sol.mu[0], sol.R[0]]
    assert np.max(np.abs(start)) < 1e-10
    for arr in (sol.g[:100], sol.mu[:100], np.linalg.norm(sol.R[:100], axis=1)):
        assert fit_rate(arr[::-1]) < 1


def test_decay_rates_match_eigenvalues(params, rem, solution):
    lam_uv = 1 / params.derived.lambda_g
    assert fit_rate(solution.g[:80][::-1]) == pytest.approx(lam_uv, rel=0.02)
    fp = ir_fixed_point(params, rem)
    lam, V = eigen(jacobian_fd(fp, params, rem))
    contracting = np.abs(lam) < 1
    i = np.flatnonzero(contracting)[np.argmax(np.abs(V[0, contracting]))]
    dist = np.abs(solution.g[-120:-20] - fp.g)
    assert fit_rate(dist) == pytest.approx(abs(lam[i]), rel=0.02)


def test_no_contraction_detected():
    params = ModelParams(d_R=1)
    rem = RemainderModel(
        xi_g=lambda g, mu, R: 0 * np.asarray(g),
        xi_mu=lambda g, mu, R: 10.0 * np.asarray(mu) + np.asarray(g) ** 2,
        xi_R=lambda g, mu, R: 0 * np.asarray(R),
        L_op=lambda g, mu: 0.5 * np.eye(1), d_R=1)
    with pytest.raises(NoContraction):
        solve_heteroclinic(0.25, -20, 20, params, rem, SolverConfig(tail_pad=10))


def test_max_iterations(params, rem):
    with pytest.raises(MaxItersExceeded):
        solve_heteroclinic(0.25, -50, 50, params, rem, SolverConfig(max_picard_iters=2))


def test_picard_solve_interface(params, rem):
    bb = build_backbone(0.3, -40, 40, params)
    seq, diag = picard_solve(bb, params, rem)
    assert (seq.n_min, seq.n_max) == (-40, 40)
    assert diag.final_residuals["g"] < 1e-10 if diag.final_residuals else True
    assert diag.tail_pad == auto_tail_pad(params, 1e-12)


def test_newton_matches_picard(params, rem):
    a = solve_heteroclinic(0.25, -60, 60, params, rem)
    b = solve_heteroclinic(0.25, -60, 60, params, rem, SolverConfig(method="newton"))
    diff = DeviationSequence(-60, 60, a.deviations.dg - b.deviations.dg, a.mu - b.mu, a.R - b.R)
    assert weighted_norm(diff, a.backbone, (1, 2, 3)) < 1e-9


def test_auto_tail_pad(params):
    rate = max(2 ** -0.1, 2 - 2**0.1)
    assert auto_tail_pad(params, 1e-12) == math.ceil(math.log(1e-12) / math.log(rate))


@pytest.mark.parametrize("kw", [{"tol_residual": 0}, {"max_picard_iters": 0},
                                {"weight_exponents": (1, 2)}, {"tail_pad": -1},
                                {"tail_tol": 1.5}, {"method": "broyden"}])
def test_solver_config_validation(kw):
    with pytest.raises(InvalidParams):
        SolverConfig(**kw)


# ---------------------------------------------------------------- residuals and windows

def test_residuals_of_exact_backbone(params):
    zr = zero_remainder_model(params)
    bb = build_backbone(0.25, -50, 50, params)
    traj = Trajectory(-50, bb.g_bar.copy(), np.zeros(101), np.zeros((101, 3)))
    res = residuals(traj, params, zr)
    assert max(res["g"], res["mu"], res["R"]) <= 1e-12


def test_residual_detects_corruption(params):
    zr = zero_remainder_model(params)
    bb = build_backbone(0.25, -50, 50, params)
    g = bb.g_bar.copy()
    g[60] += 1e-3
    prof = residual_profile(Trajectory(-50, g, np.zeros(101), np.zeros((101, 3))), params, zr)
    # defect of the step landing on the corrupted site
    assert prof["g"][59] >= 1e-4


def test_residuals_need_three_sites(params):
    with pytest.raises(InvalidParams):
        residuals(Trajectory(0, np.ones(2), np.zeros(2), np.zeros((2, 1))), params,
                  zero_remainder_model(params))


def test_window_doubling(params, rem):
    small = solve_heteroclinic(0.25, -100, 100, params, rem)
    big = extend_window(small, -200, 200, params, rem)
    assert big.diagnostics.window_truncation_estimate < 1e-8
    again = extend_window(big, -200, 200, params, rem)
    assert again.diagnostics.iterations_used == 1
    assert again.diagnostics.window_truncation_estimate < SolverConfig().tol_residual


def test_window_doubling_zero_remainder(params):
    zr = zero_remainder_model(params)
    small = solve_heteroclinic(0.25, -50, 50, params, zr)
    big = extend_window(small, -100, 100, params, zr)
    assert big.diagnostics.window_truncation_estimate == 0.0


def test_extend_window_rejects_shrinking(params, rem, solution):
    with pytest.raises(InvalidParams):
        extend_window(solution, -100, 100, params, rem)


def test_solve_is_deterministic(params, rem):
    a = solve_heteroclinic(0.2, -80, 80, params, rem)
    b = solve_heteroclinic(0.2, -80, 80, params, rem)
    assert a.g.tobytes() == b.g.tobytes()
    assert a.R.tobytes() == b.R.tobytes()
