"""Fixed points, linearizations and critical exponents of the truncated map."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    DegenerateSpectrum,
    MarginalEigenvalue,
    NewtonDiverged,
    NoConvergence,
    NonFinite,
    SingularJacobian,
)
from .model import ModelParams, RemainderModel, RGState, bms_step_vector

MARGINAL_BAND = 1e-8


def fd_jacobian(func: Callable[[np.ndarray], np.ndarray], x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian with step ``rel_step * max(1, |x_i|)`` per coordinate."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(func(x + e)) - np.asarray(func(x - e))) / (2.0 * h))
    J = np.column_stack(cols) if cols else np.zeros((0, 0))
    if not np.all(np.isfinite(J)):
        raise NonFinite("finite-difference Jacobian is not finite")
    return J


def jacobian_fd(x: RGState, params: ModelParams, rem: RemainderModel,
                rel_step: float = 1e-6) -> np.ndarray:
    """Jacobian of :func:`~bmsflow.model.bms_step` at ``x``."""
    return fd_jacobian(lambda v: bms_step_vector(v, params, rem), x.as_vector(), rel_step)


def newton_fixed_point(
    start: RGState,
    params: ModelParams,
    rem: RemainderModel,
    tol: float = 1e-12,
    max_iter: int = 60,
) -> RGState:
    """Damped Newton for ``bms_step(x) = x``.

    Steps are halved (up to 30 times) while the residual does not decrease.
    """

    def F(v):
        return bms_step_vector(v, params, rem) - v

    x = start.as_vector()
    r = F(x)
    res = np.linalg.norm(r)
    for _ in range(max_iter):
        if res < tol:
            return RGState.from_vector(x)
        J = fd_jacobian(F, x)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(f"singular Jacobian at {x}") from exc
        if not np.all(np.isfinite(dx)) or np.linalg.cond(J) > 1e14:
            raise SingularJacobian(f"ill-conditioned Jacobian at {x}")
        t = 1.0
        for _ in range(31):
            trial = x + t * dx
            try:
                r_trial = F(trial)
            except NonFinite:
                r_trial = None
            if r_trial is not None and np.linalg.norm(r_trial) < res:
                break
            t *= 0.5
        else:
            # no decrease along the Newton direction; accept if already at roundoff
            if res < 10 * tol:
                return RGState.from_vector(x)
            raise NewtonDiverged(f"line search failed at residual {res:.3e}")
        x, r = trial, r_trial
        res = np.linalg.norm(r)
    if res < tol:
        return RGState.from_vector(x)
    raise NewtonDiverged(f"no convergence after {max_iter} iterations (residual {res:.3e})")


def eigen(matrix, tol: float = 1e-10, max_refine: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (sorted by modulus, descending) and unit eigenvectors (columns).

    Each pair is polished by inverse iteration with Rayleigh-quotient shifts
    until ``|A v - lam v| < tol * max(1, |A|)``.
    """
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("eigen expects a square matrix")
    if not np.all(np.isfinite(A)):
        raise NonFinite("matrix has non-finite entries")
    n = A.shape[0]
    if n == 0:
        return np.zeros(0, complex), np.zeros((0, 0), complex)
    lam, V = np.linalg.eig(A)
    order = np.lexsort((-lam.real, -np.abs(lam)))
    lam, V = lam[order].astype(complex), V[:, order].astype(complex)
    scale = max(1.0, np.linalg.norm(A, 2))
    I = np.eye(n)
    for j in range(n):
        v = V[:, j] / np.linalg.norm(V[:, j])
        mu = lam[j]
        resid = np.linalg.norm(A @ v - mu * v)
        for _ in range(max_refine):
            if resid < tol * scale:
                break
            try:
                w = np.linalg.solve(A - (mu + 1e-14 * scale) * I, v)
            except np.linalg.LinAlgError:
                break
            v = w / np.linalg.norm(w)
            mu = np.vdot(v, A @ v)
            resid = np.linalg.norm(A @ v - mu * v)
        if not resid < tol * scale:
            raise NoConvergence(f"eigenpair {j} residual {resid:.3e} above {tol:.1e}")
        lam[j], V[:, j] = mu, _phase_fix(v)
    return lam, V


def _phase_fix(v: np.ndarray) -> np.ndarray:
    """Rotate so the largest component is real and positive (deterministic output)."""
    k = int(np.argmax(np.abs(v)))
    return v * (abs(v[k]) / v[k])


def exponents(eigenvalues, eigenvectors, L: float, iso_tol: float = 1e-6) -> tuple[float, float]:
    """Critical exponents ``(nu, omega_corr)``.

    ``nu = ln L / ln lam_mu`` where ``lam_mu`` is the eigenvalue whose
    eigenvector has the largest ``mu`` component; ``omega_corr = -ln|lam_g| /
    ln L`` with ``lam_g`` the contracting eigenvalue with the largest ``g``
    component.
    """
    lam = np.asarray(eigenvalues)
    V = np.asarray(eigenvectors)
    i_mu = int(np.argmax(np.abs(V[1])))
    lam_mu = lam[i_mu]
    others = np.delete(lam, i_mu)
    if abs(lam_mu.imag) > iso_tol or np.any(np.abs(others - lam_mu) < iso_tol * abs(lam_mu)):
        raise DegenerateSpectrum(f"mu eigenvalue {lam_mu} is not isolated")
    nu = math.log(L) / math.log(lam_mu.real)
    contracting = np.flatnonzero(np.abs(lam) < 1.0)
    if contracting.size == 0:
        return nu, float("nan")
    i_g = contracting[int(np.argmax(np.abs(V[0, contracting])))]
    omega = -math.log(abs(lam[i_g])) / math.log(L)
    return nu, omega


def manifold_tangents(fixed_point: RGState, params: ModelParams,
                      rem: RemainderModel) -> tuple[np.ndarray, np.ndarray]:
    """Unit tangent vectors of the unstable (|lam| > 1) and stable (|lam| < 1) manifolds.

    Returned as columns of two arrays, real when the spectrum is real.
    """
    lam, V = eigen(jacobian_fd(fixed_point, params, rem))
    mod = np.abs(lam)
    if np.any(np.abs(mod - 1.0) <= MARGINAL_BAND):
        raise MarginalEigenvalue(f"eigenvalue of modulus ~1 at {fixed_point}")
    if np.all(np.abs(V.imag) < 1e-12):
        V = V.real
    return V[:, mod > 1.0], V[:, mod < 1.0]


@dataclass(frozen=True)
class SpectralReport:
    fixed_point: RGState
    eigenvalues: np.ndarray
    nu: float
    omega_corr: float
    n_expanding: int
    n_contracting: int

    def to_dict(self) -> dict:
        return {
            "fixed_point": {
                "g": self.fixed_point.g,
                "mu": self.fixed_point.mu,
                "R": self.fixed_point.R.tolist(),
            },
            "eigenvalues": [{"re": float(z.real), "im": float(z.imag), "abs": float(abs(z))}
                            for z in self.eigenvalues],
            "exponents": {
                "nu": _none_if_nan(self.nu),
                "omega_corr": _none_if_nan(self.omega_corr),
            },
            "classification": {"expanding": self.n_expanding, "contracting": self.n_contracting},
        }


def _none_if_nan(x):
    return None if x is None or math.isnan(x) else float(x)


def spectral_report(point: RGState, params: ModelParams, rem: RemainderModel,
                    refine: bool = True) -> SpectralReport:
    """Newton-refine ``point`` to a fixed point and analyse its linearization."""
    fp = newton_fixed_point(point, params, rem) if refine else point
    lam, V = eigen(jacobian_fd(fp, params, rem))
    try:
        nu, omega = exponents(lam, V, params.L)
    except DegenerateSpectrum:
        nu, omega = float("nan"), float("nan")
    mod = np.abs(lam)
    return SpectralReport(fp, lam, nu, omega, int(np.sum(mod > 1.0)), int(np.sum(mod < 1.0)))


def gaussian_point(params: ModelParams) -> RGState:
    return RGState.zero(params.d_R)


def approximate_ir_point(params: ModelParams) -> RGState:
    return RGState(params.derived.g_star_bar, 0.0, np.zeros(params.d_R))


def ir_fixed_point(params: ModelParams, rem: RemainderModel) -> RGState:
    """Nontrivial fixed point, continued by Newton from ``(g_star_bar, 0, 0)``."""
    return newton_fixed_point(approximate_ir_point(params), params, rem)
