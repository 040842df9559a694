"""Hierarchical phi-four recursion on single-site effective potentials.

One RG step maps a potential ``V`` to::

    V'(psi) = -L**d * log  E_zeta[ exp(-V(L**-phi_dim * psi + zeta)) ]

with ``zeta`` Gaussian of variance ``sigma_gamma_sq``.  Potentials are even
polynomials of degree ``2m`` in the Hermite (Wick) basis ``He_k(x; C)`` of
reference variance ``C = sigma_gamma_sq / (1 - L**(-2 phi_dim))``.  With this
choice a Wick monomial is mapped exactly to ``L**(d - k phi_dim)`` times
itself at linear order, so ``v_4`` and ``v_2`` are the couplings ``g`` and
``mu`` with linear eigenvalues ``L**eps`` and ``L**((3+eps)/2)``.

The output of a step is projected back onto ``He_0, He_2, ..., He_2m`` by
Gauss-weighted least squares on the Gauss-Hermite nodes of variance ``C``;
the ``He_0`` component (an additive constant) is discarded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import hermite_e

from .errors import (
    BracketInvalid,
    InvalidParams,
    NewtonDiverged,
    QuadratureOverflow,
    SingularJacobian,
    UnstablePotential,
)
from .model import ModelParams, RemainderModel

# relative size below which a coefficient does not count as the leading one
_LEADING_RTOL = 1e-12
_BATCH = 128


def gauss_hermite_rule(q: int, sigma_sq: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for integrals against the centred Gaussian of variance ``sigma_sq``.

    Exact for polynomials of degree ``<= 2q - 1``; the weights sum to one.
    """
    if q < 1:
        raise InvalidParams("quadrature order must be at least 1")
    x, w = hermite_e.hermegauss(q)
    w = w / w.sum()
    if q % 2:
        x[q // 2] = 0.0
    return x * math.sqrt(sigma_sq), w


def hermite_basis(x, degrees, sigma_sq: float) -> np.ndarray:
    """``He_k(x; sigma_sq) = sigma**k He_k(x / sigma)`` for each ``k`` in ``degrees``.

    Returns an array of shape ``(len(degrees),) + x.shape``.
    """
    sig = math.sqrt(sigma_sq)
    x = np.asarray(x, dtype=float) / sig
    out = []
    for k in degrees:
        c = np.zeros(k + 1)
        c[k] = 1.0
        out.append(hermite_e.hermeval(x, c) * sig**k)
    return np.stack(out)


@dataclass(frozen=True)
class HierParams:
    L: int = 2
    d: int = 3
    epsilon: float = 0.1
    m: int = 4
    q: int = 64
    sigma_gamma_sq: float | None = None

    def __post_init__(self):
        if isinstance(self.L, bool) or not isinstance(self.L, int) or self.L < 2:
            raise InvalidParams(f"block ratio L must be an integer >= 2, got {self.L!r}")
        if not isinstance(self.d, int) or self.d < 1:
            raise InvalidParams("dimension d must be a positive integer")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise InvalidParams("epsilon must be positive")
        if self.m < 2:
            raise InvalidParams("m must be at least 2")
        if self.q < 2 * self.m + 1:
            raise InvalidParams(f"q={self.q} must be at least 2m+1={2 * self.m + 1}")
        if self.sigma_gamma_sq is None:
            phi = (3.0 - self.epsilon) / 4.0
            sg = -math.expm1(-2.0 * phi * math.log(self.L)) / (2.0 * phi)
            object.__setattr__(self, "sigma_gamma_sq", sg)
        if not self.sigma_gamma_sq > 0:
            raise InvalidParams("sigma_gamma_sq must be positive")

    @property
    def phi_dim(self) -> float:
        return (3.0 - self.epsilon) / 4.0

    @property
    def field_scale(self) -> float:
        return self.L ** -self.phi_dim

    @property
    def sigma_ref_sq(self) -> float:
        return self.sigma_gamma_sq / (1.0 - self.field_scale**2)

    @property
    def degrees(self) -> list[int]:
        return list(range(2, 2 * self.m + 1, 2))

    def linear_eigenvalues(self) -> np.ndarray:
        """``L**(d - k phi_dim)`` for ``k = 2, 4, ..., 2m``."""
        return np.array([float(self.L) ** (self.d - k * self.phi_dim) for k in self.degrees])

    @cached_property
    def _grid(self) -> "_Grid":
        return _Grid(self)


class _Grid:
    """Quadrature nodes and Hermite tables for one parameter set."""

    def __init__(self, p: HierParams):
        C = p.sigma_ref_sq
        self.psi, self.w_psi = gauss_hermite_rule(p.q, C)
        zeta, self.w_zeta = gauss_hermite_rule(p.q, p.sigma_gamma_sq)
        arg = p.field_scale * self.psi[:, None] + zeta[None, :]
        self.basis_arg = hermite_basis(arg, p.degrees, C)  # (m, q_psi, q_zeta)
        self.basis_psi = hermite_basis(self.psi, [0] + p.degrees, C)  # (m+1, q)
        self.basis_odd = hermite_basis(self.psi, range(1, 2 * p.m + 2, 2), C)
        self.norms = np.array([math.factorial(k) * C**k for k in [0] + p.degrees])
        self.norms_odd = np.array([math.factorial(k) * C**k for k in range(1, 2 * p.m + 2, 2)])
        self.volume = float(p.L) ** p.d
        self.lam = p.linear_eigenvalues()
        self.x_edge = 2.0 * float(np.max(np.abs(arg)))
        ends = hermite_basis(np.array([0.0, self.x_edge]), p.degrees, C)
        self.edge_rise = ends[:, 1] - ends[:, 0]


@dataclass(frozen=True)
class PotentialCoeffs:
    """Even Hermite coefficients ``(v_2, v_4, ..., v_2m)``.

    ``projection_misfit`` is the Gauss-weighted RMS collocation misfit of the
    step that produced these coefficients; ``odd_misfit`` the largest odd
    Hermite component of that step's output (zero by symmetry).
    """

    v: np.ndarray
    projection_misfit: float = 0.0
    odd_misfit: float = 0.0

    def __post_init__(self):
        v = np.array(self.v, dtype=float).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @classmethod
    def zero(cls, m: int) -> "PotentialCoeffs":
        return cls(np.zeros(m))

    @classmethod
    def from_couplings(cls, g: float, mu: float, m: int, rest=()) -> "PotentialCoeffs":
        v = np.zeros(m)
        v[0], v[1] = mu, g
        v[2:2 + len(rest)] = rest
        return cls(v)

    @property
    def m(self) -> int:
        return self.v.size

    def is_stable(self, p: HierParams) -> bool:
        """False when the potential is unbounded below on the range the quadrature of ``p`` probes."""
        return not _unstable_rows(self.v[None, :], p._grid)[0]

    def ordinary_coefficients(self, sigma_ref_sq: float) -> np.ndarray:
        """Monomial coefficients ``c_0..c_2m`` of the potential."""
        sig = math.sqrt(sigma_ref_sq)
        c = np.zeros(2 * self.m + 1)
        for j, vk in enumerate(self.v):
            k = 2 * (j + 1)
            c[k] = vk * sig**k
        mono = hermite_e.herme2poly(c)
        # herme2poly works in x/sigma; rescale to x
        return mono / sig ** np.arange(mono.size)


def _leading_sign(v: np.ndarray, weights: np.ndarray) -> int:
    """Sign of the highest coefficient whose weighted size is above roundoff."""
    size = np.abs(v * weights)
    scale = np.max(size) if v.size else 0.0
    if scale == 0.0:
        return 0
    sig = np.flatnonzero(size > _LEADING_RTOL * scale)
    return 1 if v[sig[-1]] > 0 else -1


def _unstable_rows(vs: np.ndarray, grid: "_Grid") -> np.ndarray:
    """Rows whose leading coefficient is negative and matters on the probed field range.

    A negative top coefficient makes the polynomial unbounded below; it is
    only fatal for the quadrature when it already pulls ``V`` below ``V(0)``
    at twice the largest field value the quadrature samples.
    """
    drop = vs @ grid.edge_rise < 0
    bad = np.zeros(len(vs), dtype=bool)
    for i in np.flatnonzero(drop):
        bad[i] = _leading_sign(vs[i], grid.edge_rise) < 0
    return bad


def _check_stable(v: np.ndarray, p: HierParams):
    if _unstable_rows(v[None, :], p._grid)[0]:
        raise UnstablePotential(f"potential with coefficients {v} is unbounded below")


def _phi(U: np.ndarray) -> np.ndarray:
    """``expm1(-U) + U`` without cancellation for small ``|U|``."""
    small = np.abs(U) < 1e-2
    Us = np.where(small, U, 0.0)
    series = Us * Us * (0.5 - Us * (1 / 6 - Us * (1 / 24 - Us * (1 / 120 - Us * (
        1 / 720 - Us * (1 / 5040 - Us / 40320))))))
    with np.errstate(over="ignore"):
        direct = np.expm1(-np.where(small, 0.0, U)) + U
    return np.where(small, series, direct)


def _log_mean_exp_centered(U: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``log sum_j w_j exp(-U_ij)`` for ``U`` of zero weighted mean along the last axis.

    When no node is strongly favoured the result is ``log1p(E[phi(U)])``,
    which keeps full relative precision as ``U -> 0``; otherwise the
    max-shifted form is used.
    """
    shift = np.max(-U, axis=-1)
    gentle = shift < 0.5
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        near = np.log1p(_phi(U) @ w)
        far = shift + np.log(np.exp(-U - shift[..., None]) @ w)
    return np.where(gentle, near, far)


def _step_values(vs: np.ndarray, grid: _Grid, tangent: bool):
    """Nonlinear part of ``V'`` on the psi nodes for coefficient vectors ``vs`` (n, m).

    ``V' = L**d E[V] - L**d log E[exp(-(V - E[V]))]``; the first term is
    linear in the coefficients and is applied exactly by the caller, the
    second is returned here.  With ``tangent`` the derivative of the full
    ``V'`` is returned too: ``dV'/dv_k = L**d E_V[He_k]`` under the tilted
    measure ``exp(-V) / E[exp(-V)]``.
    """
    V = np.tensordot(vs, grid.basis_arg, axes=(1, 0))  # (n, q, q)
    U = V - (V @ grid.w_zeta)[..., None]
    N = -grid.volume * _log_mean_exp_centered(U, grid.w_zeta)
    if not tangent:
        return N, None
    with np.errstate(over="ignore"):
        E = np.exp(-U - np.max(-U, axis=-1, keepdims=True)) * grid.w_zeta
    tilt = E / E.sum(axis=-1, keepdims=True)
    dVp = grid.volume * np.einsum("npz,kpz->nkp", tilt, grid.basis_arg)
    return N, dVp


def _project(values: np.ndarray, grid: _Grid) -> np.ndarray:
    """Hermite coefficients (including He_0) of node values along the last axis."""
    return (values * grid.w_psi) @ grid.basis_psi.T / grid.norms


def rg_step_nonlinear_batch(vs, p: HierParams) -> np.ndarray:
    """``step(v) - L**(d - k phi_dim) v_k`` for a batch of coefficient vectors ``(n, m)``.

    Computed directly rather than by subtraction, so it stays accurate
    relative to its own size even for very small couplings.
    """
    vs = np.atleast_2d(np.asarray(vs, dtype=float))
    grid = p._grid
    if np.any(_unstable_rows(vs, grid)):
        raise UnstablePotential("batch contains a potential that is unbounded below")
    out = np.empty_like(vs)
    for start in range(0, len(vs), _BATCH):
        N, _ = _step_values(vs[start:start + _BATCH], grid, tangent=False)
        out[start:start + _BATCH] = _project(N, grid)[:, 1:]
    if not np.all(np.isfinite(out)):
        raise QuadratureOverflow("RG step produced non-finite coefficients")
    return out


def rg_step_batch(vs, p: HierParams) -> np.ndarray:
    """Projected RG step for a batch of coefficient vectors of shape ``(n, m)``."""
    vs = np.atleast_2d(np.asarray(vs, dtype=float))
    return vs * p._grid.lam + rg_step_nonlinear_batch(vs, p)


def rg_step_potential(V: PotentialCoeffs, p: HierParams) -> PotentialCoeffs:
    """One hierarchical RG step, projected back onto the degree-2m Hermite basis.

    Raises
    ------
    UnstablePotential
        If the leading coefficient of ``V`` is negative.
    QuadratureOverflow
        If the Gaussian average cannot be represented in floating point.
    """
    v, _, misfit, odd = _step(V.v, p, tangent=False)
    return PotentialCoeffs(v, projection_misfit=misfit, odd_misfit=odd)


def _step(v: np.ndarray, p: HierParams, tangent: bool, check: bool = True):
    if v.size != p.m:
        raise InvalidParams(f"expected {p.m} coefficients, got {v.size}")
    if check:
        _check_stable(v, p)
    grid = p._grid
    N, dVp = _step_values(v[None, :], grid, tangent)
    N = N[0]
    if not np.all(np.isfinite(N)):
        raise QuadratureOverflow("Gaussian average over the fluctuation field overflowed")
    nl = _project(N, grid)
    full = np.concatenate([[nl[0]], grid.lam * v + nl[1:]])
    misfit = float(np.sqrt(np.sum(grid.w_psi * (N - nl @ grid.basis_psi) ** 2)))
    Vp = N + (grid.lam * v) @ grid.basis_psi[1:]
    odd_c = (Vp * grid.w_psi) @ grid.basis_odd.T / grid.norms_odd
    odd = float(np.max(np.abs(odd_c)))
    J = None
    if tangent:
        J = _project(dVp[0], grid)[:, 1:].T  # J[i, k] = d v'_i / d v_k
        if not np.all(np.isfinite(J)):
            raise QuadratureOverflow("tangent map is not finite")
    return full[1:], J, misfit, odd


def rg_step_tangent(V: PotentialCoeffs, p: HierParams) -> tuple[PotentialCoeffs, np.ndarray]:
    """RG step together with its exact derivative in coefficient space.

    The derivative of ``-log E[exp(-V)]`` along ``dV`` is the tilted average
    ``E_V[dV]``, evaluated with the same quadrature as the step itself.
    """
    v, J, misfit, odd = _step(V.v, p, tangent=True)
    return PotentialCoeffs(v, misfit, odd), J


def linearization_fd(V: PotentialCoeffs, p: HierParams, step: float = 1e-9) -> np.ndarray:
    """Central finite-difference Jacobian of the step in coefficient space.

    The stability check is skipped for the perturbed potentials: a step of
    size ``1e-9`` below zero in the top coefficient is harmless on the
    quadrature grid.
    """
    v = V.v
    cols = []
    for k in range(p.m):
        e = np.zeros(p.m)
        e[k] = step
        plus = _step(v + e, p, tangent=False, check=False)[0]
        minus = _step(v - e, p, tangent=False, check=False)[0]
        cols.append((plus - minus) / (2 * step))
    return np.column_stack(cols)


def extract_couplings(V: PotentialCoeffs) -> tuple[float, float]:
    """``(g, mu) = (v_4, v_2)``."""
    return float(V.v[1]), float(V.v[0])


@dataclass
class FlowResult:
    coeffs: np.ndarray  # (n_steps + 1, m)
    escaped_at: int | None = None
    reason: str | None = None

    @property
    def g(self) -> np.ndarray:
        return self.coeffs[:, 1]

    @property
    def mu(self) -> np.ndarray:
        return self.coeffs[:, 0]

    @property
    def steps(self) -> int:
        return len(self.coeffs) - 1


def flow(V0: PotentialCoeffs, steps: int, p: HierParams, escape_mu: float | None = None) -> FlowResult:
    """Iterate the RG step.

    Stops early when the potential turns unstable or the quadrature
    overflows (``reason`` records the error name), or when ``|mu|`` exceeds
    ``escape_mu``.
    """
    if steps < 1:
        raise InvalidParams("steps must be at least 1")
    _check_stable(V0.v, p)
    hist = [V0.v.copy()]
    v = V0.v
    for n in range(1, steps + 1):
        try:
            v = _step(v, p, tangent=False)[0]
        except (UnstablePotential, QuadratureOverflow) as exc:
            return FlowResult(np.array(hist), n, type(exc).__name__)
        hist.append(v)
        if escape_mu is not None and abs(v[0]) > escape_mu:
            return FlowResult(np.array(hist), n, "escaped")
    return FlowResult(np.array(hist))


def _regime(v0: np.ndarray, p: HierParams, max_steps: int, escape_mu: float) -> int:
    """+1 (massive, mu -> +inf), -1 (mu -> -inf or unstable) or 0 (exactly critical)."""
    try:
        res = flow(PotentialCoeffs(v0), max_steps, p, escape_mu=escape_mu)
    except UnstablePotential:
        return -1
    if res.reason == "escaped":
        return 1 if res.mu[-1] > 0 else -1
    if res.reason is not None:
        return -1
    # undecided within max_steps: the relevant direction shows in the last increment
    inc = res.mu[-1] - res.mu[-2]
    return int(np.sign(inc))


@dataclass
class CriticalSearchResult:
    mu0_critical: float
    history: list = field(default_factory=list)  # (lo, hi) after each bisection

    @property
    def width(self) -> float:
        lo, hi = self.history[-1] if self.history else (self.mu0_critical, self.mu0_critical)
        return hi - lo


def critical_mu_search(
    g0: float,
    p: HierParams,
    max_steps: int = 200,
    bracket: tuple[float, float] | None = None,
    rel_width: float = 1e-12,
    escape_mu: float = 0.5,
    base: PotentialCoeffs | None = None,
) -> CriticalSearchResult:
    """Bisect on the initial mass so that the flow from ``(g0, mu0)`` stays critical.

    ``base`` supplies the irrelevant couplings of the initial potential (its
    ``mu`` and ``g`` entries are overwritten).

    Raises
    ------
    BracketInvalid
        If both bracket ends flow to the same regime.
    """
    v_base = np.zeros(p.m) if base is None else np.array(base.v, dtype=float)
    v_base[1] = g0

    def regime(mu0):
        v = v_base.copy()
        v[0] = mu0
        return _regime(v, p, max_steps, escape_mu)

    lo, hi = bracket if bracket is not None else (-0.2, 0.2)
    if not lo < hi:
        raise BracketInvalid("bracket must satisfy lo < hi")
    r_lo, r_hi = regime(lo), regime(hi)
    if r_lo == 0:
        return CriticalSearchResult(lo, [(lo, lo)])
    if r_hi == 0:
        return CriticalSearchResult(hi, [(hi, hi)])
    if r_lo == r_hi:
        raise BracketInvalid(f"both ends of [{lo}, {hi}] flow to the same regime ({r_lo:+d})")
    history = []
    while hi - lo > rel_width * max(abs(lo), abs(hi)):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        r = regime(mid)
        if r == 0:
            history.append((mid, mid))
            return CriticalSearchResult(mid, history)
        if r == r_lo:
            lo = mid
        else:
            hi = mid
        history.append((lo, hi))
    return CriticalSearchResult(0.5 * (lo + hi), history)


def effective_a(p: HierParams, g_grid=None) -> tuple[float, float]:
    """Small-``g`` coefficients of ``g' = L**eps g - a_eff g**2 + c g**3 + ...`` at ``mu = 0``.

    Fits the nonlinear part ``(g' - L**eps g) / g**2`` with a cubic in ``g``
    and returns ``(a_eff, c)``; ``a_eff`` plays the role of ``L**(2 eps) a``.
    """
    g = np.geomspace(1e-5, 1e-3, 12) if g_grid is None else np.asarray(g_grid, dtype=float)
    vs = np.zeros((g.size, p.m))
    vs[:, 1] = g
    y = rg_step_nonlinear_batch(vs, p)[:, 1] / g**2
    coef = np.polynomial.polynomial.polyfit(g, y, 3)
    return float(-coef[0]), float(coef[1])


def hier_fixed_point(p: HierParams, tol: float = 1e-10, max_iter: int = 50) -> PotentialCoeffs:
    """Nontrivial fixed point by Newton in coefficient space.

    The seed is the fixed point of the quadratic truncation with the fitted
    ``a_eff`` and the mass from one step of perturbation theory.
    """
    a_eff, _ = effective_a(p)
    g_seed = (p.L**p.epsilon - 1.0) / a_eff
    shift = rg_step_potential(PotentialCoeffs.from_couplings(g_seed, 0.0, p.m), p).v[0]
    lam_mu = p.linear_eigenvalues()[0]
    v = PotentialCoeffs.from_couplings(g_seed, -shift / (lam_mu - 1.0), p.m).v.copy()
    eye = np.eye(p.m)
    for _ in range(max_iter):
        out, J = rg_step_tangent(PotentialCoeffs(v), p)
        r = out.v - v
        if np.max(np.abs(r)) < tol:
            return PotentialCoeffs(v, out.projection_misfit, out.odd_misfit)
        try:
            dv = np.linalg.solve(J - eye, -r)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian("singular Jacobian in hierarchical Newton") from exc
        t = 1.0
        while t > 1e-6:
            trial = v + t * dv
            try:
                r_trial = rg_step_potential(PotentialCoeffs(trial), p).v - trial
                if np.max(np.abs(r_trial)) < np.max(np.abs(r)):
                    break
            except (UnstablePotential, QuadratureOverflow):
                pass
            t *= 0.5
        else:
            raise NewtonDiverged("line search failed in hierarchical Newton")
        v = trial
    raise NewtonDiverged(f"no convergence after {max_iter} Newton iterations")


def hierarchical_remainder_model(p: HierParams) -> tuple[ModelParams, RemainderModel]:
    """Recast the hierarchical step as ``(g, mu, R)`` with ``R = (v_6, ..., v_2m)``.

    The ``xi`` terms are whatever the exact (projected) step adds to the
    linear-plus-quadratic part, so :func:`~bmsflow.model.bms_step` with this
    model reproduces :func:`rg_step_potential` exactly.  ``a`` is the fitted
    ``a_eff / L**(2 eps)`` and ``Lop`` is the linearization at the Gaussian
    point restricted to the irrelevant couplings.
    """
    a_eff, _ = effective_a(p)
    lam = p.linear_eigenvalues()
    lam_g = float(p.L) ** p.epsilon
    d = p.m - 2
    Lop = np.diag(lam[2:])
    gamma = float(lam[2])
    params = ModelParams(L=float(p.L), epsilon=p.epsilon, a=a_eff / lam_g**2, gamma=gamma,
                         d_R=d, epsilon_max=max(0.5, p.epsilon))

    def nonlinear(g, mu, R):
        g = np.asarray(g, dtype=float)
        mu = np.broadcast_to(np.asarray(mu, dtype=float), g.shape)
        R = np.broadcast_to(np.asarray(R, dtype=float), g.shape + (d,))
        vs = np.column_stack([mu.reshape(-1), g.reshape(-1), R.reshape(-1, d)])
        return rg_step_nonlinear_batch(vs, p).reshape(g.shape + (p.m,)), g

    def xi_g(g, mu, R):
        nl, g = nonlinear(g, mu, R)
        return nl[..., 1] + a_eff * g * g

    def xi_mu(g, mu, R):
        return nonlinear(g, mu, R)[0][..., 0]

    def xi_R(g, mu, R):
        return nonlinear(g, mu, R)[0][..., 2:]

    rem = RemainderModel(
        xi_g=xi_g, xi_mu=xi_mu, xi_R=xi_R, L_op=lambda g, mu: Lop, d_R=d,
        lipschitz_budget=float("inf"), name="hierarchical",
        coefficients={"a_eff": a_eff, "L": p.L, "m": p.m, "q": p.q},
    )
    return params, rem
