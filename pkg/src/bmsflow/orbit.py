"""Complete heteroclinic trajectories of the truncated RG map.

A trajectory is written as ``(g_bar_n + dg_n, mu_n, R_n)`` around the
explicit backbone orbit ``g_bar_n`` of the one-dimensional map ``f``.  Each
deviation variable is resummed in the direction in which its recursion is
stable:

* ``mu`` backwards from the infrared end (it is expanding, so it must not blow
  up as ``n -> +inf``),
* ``R`` forwards from the ultraviolet end (the contraction ``Lop`` makes this
  stable),
* ``dg`` outwards from the anchor ``dg_0 = 0``: forward products of the
  linearization for ``n > 0`` and inverse products for ``n < 0``.

The resulting fixed-point equation on two-sided sequences is solved by plain
Picard iteration in a sup norm calibrated by powers of ``g_bar_n``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    InvalidParams,
    MaxItersExceeded,
    NoContraction,
    NonFinite,
    OmegaOutOfDomain,
    SingularLinearization,
)
from .model import (
    ModelParams,
    RemainderModel,
    f_inverse_lower,
    f_simplified,
    linear_coefficient_A,
)

log = logging.getLogger(__name__)

#: largest internal pad on either side of the requested window
MAX_TAIL_PAD = 20000


@dataclass(frozen=True)
class BackboneOrbit:
    n_min: int
    n_max: int
    g_bar: np.ndarray
    omega0: float

    @property
    def n(self) -> np.ndarray:
        return np.arange(self.n_min, self.n_max + 1)

    def __len__(self) -> int:
        return self.n_max - self.n_min + 1

    def index(self, n: int) -> int:
        if not self.n_min <= n <= self.n_max:
            raise IndexError(f"n={n} outside [{self.n_min}, {self.n_max}]")
        return n - self.n_min

    def at(self, n: int) -> float:
        return float(self.g_bar[self.index(n)])

    def extended(self, n_min: int, n_max: int, params: ModelParams) -> "BackboneOrbit":
        """Continue the orbit to a window containing the current one."""
        if n_min > self.n_min or n_max < self.n_max:
            raise InvalidParams("extended window must contain the current window")
        lo = []
        x = self.g_bar[0]
        for _ in range(self.n_min - n_min):
            x = _checked_inverse(x, params)
            lo.append(x)
        hi = []
        x = self.g_bar[-1]
        for _ in range(n_max - self.n_max):
            x = f_simplified(x, params)
            hi.append(x)
        g_bar = np.concatenate((lo[::-1], self.g_bar, hi))
        g_bar.setflags(write=False)
        return BackboneOrbit(n_min, n_max, g_bar, self.omega0)


def _checked_inverse(y: float, params: ModelParams) -> float:
    x = f_inverse_lower(y, params)
    if x <= 0.0:
        raise NonFinite("backbone underflowed to zero; window too long on the ultraviolet side")
    return x


def build_backbone(
    omega0: float, n_min: int, n_max: int, params: ModelParams, strict: bool = True
) -> BackboneOrbit:
    """Backbone orbit with ``g_bar_0 = omega0 * g_star_bar``.

    Forward entries come from ``f`` and backward entries from
    :func:`~bmsflow.model.f_inverse_lower`.  With ``strict`` the anchor must
    satisfy ``0 < omega0 < 1/2``; otherwise ``0 < omega0 < 1``.
    """
    if not n_min <= 0 <= n_max:
        raise InvalidParams(f"window [{n_min}, {n_max}] must contain 0")
    upper = 0.5 if strict else 1.0
    if not (math.isfinite(omega0) and 0.0 < omega0 < upper):
        raise OmegaOutOfDomain(f"omega0={omega0!r} outside (0, {upper})")
    g0 = omega0 * params.derived.g_star_bar
    seed = BackboneOrbit(0, 0, np.array([g0]), omega0)
    return seed.extended(n_min, n_max, params)


@dataclass(frozen=True)
class DeviationSequence:
    """Deviations ``(dg_n, mu_n, R_n)`` from the backbone on ``[n_min, n_max]``."""

    n_min: int
    n_max: int
    dg: np.ndarray
    mu: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        size = self.n_max - self.n_min + 1
        R = np.asarray(self.R, dtype=float)
        if R.ndim == 1:
            R = R.reshape(size, -1)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "dg", np.asarray(self.dg, dtype=float))
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        if self.dg.shape != (size,) or self.mu.shape != (size,) or R.shape[0] != size:
            raise InvalidParams("deviation arrays do not match the window")

    @property
    def n(self) -> np.ndarray:
        return np.arange(self.n_min, self.n_max + 1)

    @property
    def d_R(self) -> int:
        return self.R.shape[1]

    @classmethod
    def zeros(cls, n_min: int, n_max: int, d_R: int) -> "DeviationSequence":
        size = n_max - n_min + 1
        return cls(n_min, n_max, np.zeros(size), np.zeros(size), np.zeros((size, d_R)))

    def restrict(self, n_min: int, n_max: int) -> "DeviationSequence":
        if n_min < self.n_min or n_max > self.n_max:
            raise InvalidParams("restriction window must lie inside the sequence window")
        s = slice(n_min - self.n_min, n_max - self.n_min + 1)
        return DeviationSequence(n_min, n_max, self.dg[s].copy(), self.mu[s].copy(), self.R[s].copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.dg)) and np.all(np.isfinite(self.mu))
                    and np.all(np.isfinite(self.R)))


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the sequence-space solve.

    ``weight_exponents`` are the powers of ``g_bar_n`` that calibrate the sup
    norm of ``(dg, mu, R)``.  ``tail_pad`` is the number of extra sites solved
    on each side of the requested window (``None`` picks it from
    ``tail_tol`` and the backbone's asymptotic rates).
    """

    tol_residual: float = 1e-10
    max_picard_iters: int = 200
    weight_exponents: tuple = (1.0, 2.0, 3.0)
    strict_omega_domain: bool = True
    tail_pad: int | None = None
    tail_tol: float = 1e-12
    method: str = "picard"

    def __post_init__(self):
        object.__setattr__(self, "weight_exponents", tuple(float(x) for x in self.weight_exponents))
        if not self.tol_residual > 0:
            raise InvalidParams("tol_residual must be positive")
        if self.max_picard_iters < 1:
            raise InvalidParams("max_picard_iters must be at least 1")
        if len(self.weight_exponents) != 3:
            raise InvalidParams("weight_exponents needs three entries (dg, mu, R)")
        if self.tail_pad is not None and self.tail_pad < 0:
            raise InvalidParams("tail_pad must be nonnegative")
        if not 0 < self.tail_tol < 1:
            raise InvalidParams("tail_tol must lie in (0, 1)")
        if self.method not in ("picard", "newton"):
            raise InvalidParams(f"unknown method {self.method!r}")


@dataclass
class Diagnostics:
    contraction_ratio_estimates: list = field(default_factory=list)
    final_residuals: dict = field(default_factory=dict)
    iterations_used: int = 0
    window_truncation_estimate: float = float("nan")
    tail_pad: int = 0
    changes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "contraction_ratio_estimates": [float(x) for x in self.contraction_ratio_estimates],
            "final_residuals": {k: float(v) for k, v in self.final_residuals.items()},
            "iterations_used": int(self.iterations_used),
            "window_truncation_estimate": (
                None if math.isnan(self.window_truncation_estimate)
                else float(self.window_truncation_estimate)
            ),
            "tail_pad": int(self.tail_pad),
            "changes": [float(x) for x in self.changes],
        }


def _check_window(seq: DeviationSequence, backbone: BackboneOrbit):
    if (seq.n_min, seq.n_max) != (backbone.n_min, backbone.n_max):
        raise InvalidParams("deviation sequence and backbone windows differ")


def _xi(fn, seq: DeviationSequence, backbone: BackboneOrbit):
    return np.asarray(fn(backbone.g_bar + seq.dg, seq.mu, seq.R), dtype=float)


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what} resummation overflowed")
    return arr


def resum_mu(seq: DeviationSequence, backbone: BackboneOrbit, params: ModelParams,
             rem: RemainderModel) -> np.ndarray:
    """``mu_n = -sum_{p >= n} lambda_mu**-(p-n+1) xi_mu(p)``.

    Beyond ``n_max`` the sum is closed with the endpoint value of ``xi_mu``
    (the trajectory sits at the infrared fixed point there), which gives a
    geometric tail ``xi_mu(n_max) * lambda_mu**-(n_max-n+1) / (lambda_mu - 1)``.
    Kernel terms below ``1e-18`` are dropped.
    """
    _check_window(seq, backbone)
    lam = params.derived.lambda_mu
    xi = _xi(rem.xi_mu, seq, backbone)
    size = xi.size
    K = min(size, int(math.ceil(18 * math.log(10) / math.log(lam))) + 1)
    kernel = lam ** -np.arange(1.0, K + 1.0)
    # sites past n_max carry the closure value; the tail after the kernel is summed exactly
    padded = np.concatenate((xi, np.full(K - 1, xi[-1])))
    head = sliding_window_view(padded, K) @ kernel
    dist = np.arange(size - 1, -1, -1)  # n_max - n
    # sites with n_max - n < K still miss sum_{k >= K} lam**-(k+1) xi(n_max)
    tail = np.where(dist < K, xi[-1] * lam ** -(K + 1.0) / (1.0 - 1.0 / lam), 0.0)
    return _finite(-(head + tail), "mu")


def resum_R(seq: DeviationSequence, backbone: BackboneOrbit, params: ModelParams,
            rem: RemainderModel) -> np.ndarray:
    """Bounded-at-the-ultraviolet solution of ``R_{n+1} = Lop(n) R_n + xi_R(n)``.

    The sum over sites before ``n_min`` is closed at the Gaussian fixed point:
    ``R_{n_min} = (I - Lop(0, 0))^{-1} xi_R(0, 0, 0)``.
    """
    _check_window(seq, backbone)
    d = rem.d_R
    size = len(backbone)
    out = np.empty((size, d))
    if d == 0:
        return out
    xi = _xi(rem.xi_R, seq, backbone).reshape(size, d)
    xi0 = np.asarray(rem.xi_R(np.zeros(1), np.zeros(1), np.zeros((1, d))), dtype=float).reshape(d)
    out[0] = np.linalg.solve(np.eye(d) - rem.L_op(0.0, 0.0), xi0)
    g = backbone.g_bar + seq.dg
    for k in range(size - 1):
        out[k + 1] = rem.L_op(g[k], seq.mu[k]) @ out[k] + xi[k]
    return _finite(out, "R")


def solve_linear_dg(A: np.ndarray, B: np.ndarray, anchor: int) -> np.ndarray:
    """Solve ``x_{k+1} = A_k x_k + B_k`` with ``x[anchor] = 0``.

    For ``k > anchor`` this is the forward product unrolling; for
    ``k < anchor`` the inverse products, ``x_k = (x_{k+1} - B_k) / A_k``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if np.any(np.abs(A[:anchor]) < 1e-12) or np.any(np.abs(A[anchor:-1]) < 1e-12):
        raise SingularLinearization("backbone linearization vanishes inside the window")
    x = np.empty_like(B)
    x[anchor] = 0.0
    for k in range(anchor, B.size - 1):
        x[k + 1] = A[k] * x[k] + B[k]
    for k in range(anchor - 1, -1, -1):
        x[k] = (x[k + 1] - B[k]) / A[k]
    return x


def resum_dg(seq: DeviationSequence, backbone: BackboneOrbit, params: ModelParams,
             rem: RemainderModel) -> np.ndarray:
    """Deviation ``dg`` anchored at ``dg_0 = 0``.

    ``dg_{n+1} = A_n dg_n + B_n`` with ``A_n = f'(g_bar_n)`` and
    ``B_n = -L**(2 eps) a dg_n**2 + xi_g(n)``; this is exact because ``f`` is
    quadratic.
    """
    _check_window(seq, backbone)
    lg = params.derived.lambda_g
    A = linear_coefficient_A(backbone.g_bar, params)
    B = -lg * lg * params.a * seq.dg**2 + _xi(rem.xi_g, seq, backbone)
    return _finite(solve_linear_dg(A, B, backbone.index(0)), "dg")


def weights(backbone: BackboneOrbit, exponents) -> tuple:
    gb = backbone.g_bar
    return tuple(gb**e for e in exponents)


def weighted_norm(seq: DeviationSequence, backbone: BackboneOrbit, exponents) -> float:
    """``sup_n max(|dg_n|/g_bar_n**a_g, |mu_n|/g_bar_n**a_mu, |R_n|/g_bar_n**a_R)``."""
    wg, wm, wr = weights(backbone, exponents)
    parts = [np.abs(seq.dg) / wg, np.abs(seq.mu) / wm]
    if seq.d_R:
        parts.append(np.linalg.norm(seq.R, axis=1) / wr)
    return float(max(np.max(p) for p in parts))


def _difference(a: DeviationSequence, b: DeviationSequence) -> DeviationSequence:
    return DeviationSequence(a.n_min, a.n_max, a.dg - b.dg, a.mu - b.mu, a.R - b.R)


def picard_sweep(seq: DeviationSequence, backbone: BackboneOrbit, params: ModelParams,
                 rem: RemainderModel) -> DeviationSequence:
    """One Gauss-Seidel pass: ``mu``, then ``R``, then ``dg``, each using the latest values."""
    mu = resum_mu(seq, backbone, params, rem)
    seq = replace(seq, mu=mu)
    R = resum_R(seq, backbone, params, rem)
    seq = replace(seq, R=R)
    dg = resum_dg(seq, backbone, params, rem)
    return replace(seq, dg=dg)


def auto_tail_pad(params: ModelParams, tail_tol: float) -> int:
    """Pad length after which the slower backbone rate has decayed below ``tail_tol``."""
    dc = params.derived
    rate = max(1.0 / dc.lambda_g, abs(2.0 - dc.lambda_g))
    if rate >= 1.0:
        return MAX_TAIL_PAD
    return min(MAX_TAIL_PAD, int(math.ceil(math.log(tail_tol) / math.log(rate))))


def _seed(initial: DeviationSequence | None, backbone: BackboneOrbit, exponents,
          d_R: int) -> DeviationSequence:
    """Map an initial guess onto the backbone's window.

    Sites outside the guess are filled with calibrated tails: the infrared end
    is held constant, the ultraviolet end is scaled by ``(g_bar_n/g_bar_edge)**alpha``.
    """
    if initial is None:
        return DeviationSequence.zeros(backbone.n_min, backbone.n_max, d_R)
    lo = max(initial.n_min, backbone.n_min)
    hi = min(initial.n_max, backbone.n_max)
    if lo > hi:
        raise InvalidParams("initial guess does not overlap the solve window")
    src = initial.restrict(lo, hi)
    out = DeviationSequence.zeros(backbone.n_min, backbone.n_max, d_R)
    s = slice(lo - backbone.n_min, hi - backbone.n_min + 1)
    out.dg[s], out.mu[s], out.R[s] = src.dg, src.mu, src.R
    gb = backbone.g_bar
    e_g, e_mu, e_R = exponents
    i_lo = s.start
    if i_lo > 0:
        ratio = gb[:i_lo] / gb[i_lo]
        out.dg[:i_lo] = src.dg[0] * ratio**e_g
        out.mu[:i_lo] = src.mu[0] * ratio**e_mu
        out.R[:i_lo] = src.R[0] * (ratio**e_R)[:, None]
    i_hi = s.stop
    if i_hi < len(gb):
        out.dg[i_hi:] = src.dg[-1]
        out.mu[i_hi:] = src.mu[-1]
        out.R[i_hi:] = src.R[-1]
    return out


def picard_solve(
    backbone: BackboneOrbit,
    params: ModelParams,
    rem: RemainderModel,
    cfg: SolverConfig | None = None,
    initial: DeviationSequence | None = None,
) -> tuple[DeviationSequence, Diagnostics]:
    """Solve for the deviation sequence on the backbone's window.

    The equations are solved on the window widened by ``tail_pad`` sites on
    each side, so that the resummation tails beyond the requested window are
    carried by the trajectory itself; the result is restricted back to the
    backbone's window.  Iteration stops once the calibrated sup-norm change of
    a sweep drops below ``cfg.tol_residual``.

    Raises
    ------
    NoContraction
        If the observed contraction ratio is ``>= 1`` on three consecutive sweeps.
    MaxItersExceeded
        If ``cfg.max_picard_iters`` sweeps do not reach the tolerance.
    """
    solution = _solve_padded(backbone, params, rem, cfg or SolverConfig(), initial)
    return solution.deviations, solution.diagnostics


def _solve_padded(backbone, params, rem, cfg, initial) -> "HeteroclinicSolution":
    if rem.d_R != params.d_R:
        raise InvalidParams(f"remainder model has d_R={rem.d_R}, params has d_R={params.d_R}")
    pad = cfg.tail_pad if cfg.tail_pad is not None else auto_tail_pad(params, cfg.tail_tol)
    ext = backbone.extended(backbone.n_min - pad, backbone.n_max + pad, params)
    seq = _seed(initial, ext, cfg.weight_exponents, rem.d_R)
    diag = Diagnostics(tail_pad=pad)
    if cfg.method == "newton":
        seq = _newton_krylov(seq, ext, params, rem, cfg)

    prev_change = None
    bad_streak = 0
    for sweep in range(1, cfg.max_picard_iters + 1):
        new = picard_sweep(seq, ext, params, rem)
        change = weighted_norm(_difference(new, seq), ext, cfg.weight_exponents)
        diag.changes.append(change)
        if prev_change is not None and prev_change > 0:
            ratio = change / prev_change
            diag.contraction_ratio_estimates.append(ratio)
            bad_streak = bad_streak + 1 if ratio >= 1.0 else 0
        prev_change = change
        seq = new
        diag.iterations_used = sweep
        log.debug("sweep %d: weighted change %.3e", sweep, change)
        if not math.isfinite(change):
            raise NonFinite(f"weighted change is not finite at sweep {sweep}")
        if change < cfg.tol_residual:
            break
        if bad_streak >= 3:
            raise NoContraction(
                f"contraction ratio >= 1 on three consecutive sweeps (last {ratio:.3g})"
            )
    else:
        raise MaxItersExceeded(
            f"no convergence after {cfg.max_picard_iters} sweeps (last change {change:.3e})"
        )

    window = seq.restrict(backbone.n_min, backbone.n_max)
    sol = HeteroclinicSolution(backbone, window, diag, padded=seq, padded_backbone=ext)
    diag.final_residuals = residuals(sol.trajectory(), params, rem)
    return sol


def _newton_krylov(seq, ext, params, rem, cfg) -> DeviationSequence:
    """Newton-Krylov solve of ``sweep(x) = x`` in calibrated variables."""
    from scipy.optimize import NoConvergence as KrylovNoConvergence, newton_krylov

    wg, wm, wr = weights(ext, cfg.weight_exponents)
    size, d = len(ext), rem.d_R

    def unpack(z):
        return DeviationSequence(
            ext.n_min, ext.n_max, z[:size] * wg, z[size:2 * size] * wm,
            z[2 * size:].reshape(size, d) * wr[:, None],
        )

    def pack(s):
        return np.concatenate((s.dg / wg, s.mu / wm, (s.R / wr[:, None]).ravel()))

    def F(z):
        s = unpack(z)
        return pack(picard_sweep(s, ext, params, rem)) - z

    try:
        z = newton_krylov(F, pack(seq), f_tol=0.1 * cfg.tol_residual, method="lgmres")
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, KrylovNoConvergence) as exc:
        # acceleration only: the Picard loop that follows still decides convergence
        log.warning("Newton-Krylov acceleration failed (%s); continuing with Picard", exc)
        return seq
    return unpack(z)


@dataclass(frozen=True)
class Trajectory:
    """A full trajectory ``(g_n, mu_n, R_n)`` on a finite window."""

    n_min: int
    g: np.ndarray
    mu: np.ndarray
    R: np.ndarray
    dg: np.ndarray | None = None

    @property
    def n(self) -> np.ndarray:
        return np.arange(self.n_min, self.n_min + len(self.g))


def residual_profile(traj: Trajectory, params: ModelParams, rem: RemainderModel) -> dict:
    """Per-site defects ``|x_{n+1} - step(x_n)|`` for each equation, ``n_min <= n < n_max``."""
    dc = params.derived
    g, mu, R = np.asarray(traj.g), np.asarray(traj.mu), np.asarray(traj.R).reshape(len(traj.g), -1)
    g_map = f_simplified(g[:-1], params) + rem.xi_g(g[:-1], mu[:-1], R[:-1])
    mu_map = dc.lambda_mu * mu[:-1] + rem.xi_mu(g[:-1], mu[:-1], R[:-1])
    out = {"g": np.abs(g[1:] - g_map), "mu": np.abs(mu[1:] - mu_map)}
    if R.shape[1]:
        LR = np.stack([rem.L_op(g[k], mu[k]) @ R[k] for k in range(len(g) - 1)])
        R_map = LR + rem.xi_R(g[:-1], mu[:-1], R[:-1])
        out["R"] = np.linalg.norm(R[1:] - R_map, axis=1)
    else:
        out["R"] = np.zeros(len(g) - 1)
    return out


def residuals(traj: Trajectory, params: ModelParams, rem: RemainderModel) -> dict:
    """Sup norms of the trajectory defects plus ``|dg_0|``."""
    if len(traj.g) < 3:
        raise InvalidParams("residuals need a window of at least three sites")
    prof = residual_profile(traj, params, rem)
    out = {k: float(np.max(v)) for k, v in prof.items()}
    if traj.dg is not None and traj.n_min <= 0 < traj.n_min + len(traj.g):
        out["dg0"] = float(abs(traj.dg[-traj.n_min]))
    else:
        out["dg0"] = float("nan")
    return out


@dataclass
class HeteroclinicSolution:
    backbone: BackboneOrbit
    deviations: DeviationSequence
    diagnostics: Diagnostics
    padded: DeviationSequence = field(repr=False, default=None)
    padded_backbone: BackboneOrbit = field(repr=False, default=None)

    @property
    def n(self) -> np.ndarray:
        return self.backbone.n

    @property
    def g(self) -> np.ndarray:
        return self.backbone.g_bar + self.deviations.dg

    @property
    def mu(self) -> np.ndarray:
        return self.deviations.mu

    @property
    def R(self) -> np.ndarray:
        return self.deviations.R

    def trajectory(self) -> Trajectory:
        return Trajectory(self.backbone.n_min, self.g, self.mu, self.R, self.deviations.dg)


def solve_heteroclinic(
    omega0: float,
    n_min: int,
    n_max: int,
    params: ModelParams,
    rem: RemainderModel,
    cfg: SolverConfig | None = None,
    initial: DeviationSequence | None = None,
) -> HeteroclinicSolution:
    """Build the backbone and solve for the complete trajectory in one call."""
    cfg = cfg or SolverConfig()
    backbone = build_backbone(omega0, n_min, n_max, params, strict=cfg.strict_omega_domain)
    return _solve_padded(backbone, params, rem, cfg, initial)


def extend_window(
    solution: HeteroclinicSolution,
    new_n_min: int,
    new_n_max: int,
    params: ModelParams,
    rem: RemainderModel,
    cfg: SolverConfig | None = None,
) -> HeteroclinicSolution:
    """Re-solve on a larger window seeded by an existing solution.

    ``diagnostics.window_truncation_estimate`` is the calibrated sup-norm
    change of the solution on the old window.
    """
    old = solution.backbone
    if new_n_min > old.n_min or new_n_max < old.n_max:
        raise InvalidParams("new window must contain the old window")
    cfg = cfg or SolverConfig()
    backbone = old.extended(new_n_min, new_n_max, params)
    seed = solution.padded if solution.padded is not None else solution.deviations
    new = _solve_padded(backbone, params, rem, cfg, seed)
    on_old = new.deviations.restrict(old.n_min, old.n_max)
    new.diagnostics.window_truncation_estimate = weighted_norm(
        _difference(on_old, solution.deviations), old, cfg.weight_exponents
    )
    return new
