"""Model constants, the one-dimensional backbone map and the truncated RG step.

The RG map acts on triples ``(g, mu, R)``::

    g'  = L**eps * g - L**(2*eps) * a * g**2 + xi_g(g, mu, R)
    mu' = L**((3+eps)/2) * mu              + xi_mu(g, mu, R)
    R'  = Lop(g, mu) @ R                   + xi_R(g, mu, R)

``R`` is a finite vector of length ``d_R`` standing in for the remainder
functional.  The ``xi`` terms and the contraction ``Lop`` are supplied by a
:class:`RemainderModel`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import (
    BudgetExceeded,
    DiscriminantNegative,
    InvalidParams,
    NonFinite,
    OutOfBasin,
)

#: epsilon above this value triggers a warning (the theory is perturbative in eps)
EPSILON_WARN = 0.25


@dataclass(frozen=True)
class ModelParams:
    """Parameters of the truncated map.

    ``a`` defaults to ``ln L`` when left as ``None``.
    """

    L: float = 2.0
    epsilon: float = 0.1
    a: float | None = None
    gamma: float = 0.5
    d_R: int = 3
    epsilon_max: float = 0.5

    def __post_init__(self):
        if self.a is None:
            object.__setattr__(self, "a", math.log(self.L) if self.L > 1 else float("nan"))
        for name in ("L", "epsilon", "a", "gamma", "epsilon_max"):
            val = getattr(self, name)
            if not isinstance(val, (int, float)) or not math.isfinite(val):
                raise InvalidParams(f"{name} must be a finite real, got {val!r}")
        if not self.L > 1:
            raise InvalidParams(f"L must exceed 1, got {self.L}")
        if not 0 < self.epsilon <= self.epsilon_max:
            raise InvalidParams(
                f"epsilon must lie in (0, {self.epsilon_max}], got {self.epsilon}"
            )
        if not self.a > 0:
            raise InvalidParams(f"a must be positive, got {self.a}")
        if not 0 < self.gamma < 1:
            raise InvalidParams(f"gamma must lie in (0, 1), got {self.gamma}")
        if isinstance(self.d_R, bool) or not isinstance(self.d_R, int) or self.d_R < 0:
            raise InvalidParams(f"d_R must be a nonnegative integer, got {self.d_R!r}")
        if self.epsilon > EPSILON_WARN:
            warnings.warn(
                f"epsilon={self.epsilon} is above {EPSILON_WARN}; the heteroclinic "
                "construction is only expected to hold for small epsilon",
                RuntimeWarning,
                stacklevel=3,
            )

    @cached_property
    def derived(self) -> "DerivedConstants":
        return derive_constants(self)


@dataclass(frozen=True)
class DerivedConstants:
    phi_dim: float
    lambda_g: float
    lambda_mu: float
    g_star_bar: float
    sigma_gamma_sq: float


def derive_constants(params: ModelParams) -> DerivedConstants:
    """Closed-form constants of the model.

    ``sigma_gamma_sq`` is the fluctuation variance at coincident points,
    ``int_1^L dl/l l**(-2 phi_dim)``, with the cutoff normalized to ``u(0) = 1``.
    """
    if not isinstance(params, ModelParams):
        raise InvalidParams("derive_constants expects a ModelParams instance")
    L, eps, a = params.L, params.epsilon, params.a
    phi_dim = (3.0 - eps) / 4.0
    lambda_g = L**eps
    return DerivedConstants(
        phi_dim=phi_dim,
        lambda_g=lambda_g,
        lambda_mu=L ** ((3.0 + eps) / 2.0),
        # expm1 keeps L**eps - 1 accurate for tiny eps
        g_star_bar=math.expm1(eps * math.log(L)) / (lambda_g**2 * a),
        sigma_gamma_sq=-math.expm1(-2.0 * phi_dim * math.log(L)) / (2.0 * phi_dim),
    )


def f_simplified(x, params: ModelParams):
    """Backbone map ``f(x) = L**eps x - L**(2 eps) a x**2`` (vectorized)."""
    lg = params.derived.lambda_g
    return lg * x - lg * lg * params.a * x * x


def f_inverse_lower(y: float, params: ModelParams) -> float:
    """Smaller root of ``f(x) = y``; continues the backbone orbit backwards.

    Raises
    ------
    DiscriminantNegative
        If ``y > 1/(4a)`` so that ``f(x) = y`` has no real root.
    OutOfBasin
        If ``y`` is outside ``[0, g_star_bar)``.
    """
    lg = params.derived.lambda_g
    a = params.a
    disc = lg * lg * (1.0 - 4.0 * a * y)
    if disc < 0:
        raise DiscriminantNegative(f"y={y!r} exceeds 1/(4a)={1 / (4 * a)!r}")
    if not 0 <= y < params.derived.g_star_bar:
        raise OutOfBasin(f"y={y!r} is outside [0, g_star_bar)")
    # rationalized form of (lg - sqrt(disc)) / (2 lg^2 a); no cancellation for small y
    return 2.0 * y / (lg + math.sqrt(disc))


def linear_coefficient_A(g_bar, params: ModelParams):
    """Derivative of the backbone map, ``L**eps - 2 L**(2 eps) a g_bar``."""
    lg = params.derived.lambda_g
    return lg - 2.0 * lg * lg * params.a * g_bar


@dataclass(frozen=True)
class RGState:
    """One point ``(g, mu, R)`` of the truncated coordinate system."""

    g: float
    mu: float
    R: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(-1)
        R.setflags(write=False)
        object.__setattr__(self, "g", float(self.g))
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "R", R)
        if not (math.isfinite(self.g) and math.isfinite(self.mu) and np.all(np.isfinite(R))):
            raise NonFinite(f"non-finite state: {self!r}")

    @property
    def d_R(self) -> int:
        return self.R.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.g, self.mu], self.R))

    @classmethod
    def from_vector(cls, vec) -> "RGState":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0], vec[1], vec[2:])

    @classmethod
    def zero(cls, d_R: int) -> "RGState":
        return cls(0.0, 0.0, np.zeros(d_R))


# xi callables take g, mu of shape () or (n,) and R of shape (d_R,) or (n, d_R)
XiScalar = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RemainderModel:
    """Pluggable remainder terms of the RG map.

    ``xi_g``, ``xi_mu`` and ``xi_R`` are vectorized over a leading batch axis:
    called with ``g`` and ``mu`` of shape ``(n,)`` and ``R`` of shape
    ``(n, d_R)`` they return arrays of shape ``(n,)``, ``(n,)`` and
    ``(n, d_R)``.  ``L_op(g, mu)`` returns the ``(d_R, d_R)`` matrix of the
    contraction at scalar ``(g, mu)``.
    """

    xi_g: XiScalar
    xi_mu: XiScalar
    xi_R: XiScalar
    L_op: Callable[[float, float], np.ndarray]
    d_R: int
    lipschitz_budget: float = 1.0
    name: str = "custom"
    coefficients: dict = field(default_factory=dict)

    def apply_L(self, g: float, mu: float, R: np.ndarray) -> np.ndarray:
        return self.L_op(g, mu) @ R


def householder(d: int) -> np.ndarray:
    """Fixed orthogonal (and symmetric) matrix ``I - 2 u u^T``; spectrum {-1, 1, ..., 1}."""
    if d == 0:
        return np.zeros((0, 0))
    u = np.arange(1.0, d + 1.0)
    u /= np.linalg.norm(u)
    return np.eye(d) - 2.0 * np.outer(u, u)


def _unit(d: int, k: int) -> np.ndarray:
    e = np.zeros(d)
    if d:
        e[k % d] = 1.0
    return e


@dataclass(frozen=True)
class CubicCoefficients:
    """Coefficients of the default cubic remainder model.

    ``modulation`` scales the contraction as ``gamma Q / (1 + modulation (g^2 + mu^2))``.
    """

    c_g: float = 1.0
    c_gR: float = 0.5
    c_mu: float = 1.0
    c_muR: float = 0.5
    c_R: float = 1.0
    modulation: float = 0.0

    def __post_init__(self):
        for name, val in vars(self).items():
            if not math.isfinite(val):
                raise InvalidParams(f"coefficient {name} must be finite")
        if self.modulation < 0:
            raise InvalidParams("modulation must be nonnegative")


def _contraction(params: ModelParams, modulation: float):
    gQ = params.gamma * householder(params.d_R)
    if modulation == 0.0:
        return lambda g, mu: gQ
    return lambda g, mu: gQ / (1.0 + modulation * (g * g + mu * mu))


def default_remainder_model(
    params: ModelParams,
    coeffs: CubicCoefficients | None = None,
    lipschitz_budget: float = 1.0,
) -> RemainderModel:
    """Cubic stand-in for the remainder terms.

    ``xi_g = c_g g^3 + c_gR g <w, R>``, ``xi_mu = c_mu g^2 + c_muR g <w', R>``,
    ``xi_R = c_R g^3 v`` and ``Lop = gamma Q`` with ``Q`` orthogonal, optionally
    damped by a bounded (g, mu) factor.  The sampled Lipschitz constant on the
    working box is checked against ``lipschitz_budget``.
    """
    coeffs = coeffs or CubicCoefficients()
    d = params.d_R
    w, w2 = _unit(d, 0), _unit(d, 1)
    v = np.ones(d) / math.sqrt(d) if d else np.zeros(0)
    c = coeffs

    def xi_g(g, mu, R):
        g = np.asarray(g, dtype=float)
        return c.c_g * g**3 + c.c_gR * g * (np.asarray(R) @ w)

    def xi_mu(g, mu, R):
        g = np.asarray(g, dtype=float)
        return c.c_mu * g**2 + c.c_muR * g * (np.asarray(R) @ w2)

    def xi_R(g, mu, R):
        g = np.asarray(g, dtype=float)
        return c.c_R * g[..., None] ** 3 * v

    model = RemainderModel(
        xi_g=xi_g,
        xi_mu=xi_mu,
        xi_R=xi_R,
        L_op=_contraction(params, c.modulation),
        d_R=d,
        lipschitz_budget=lipschitz_budget,
        name="cubic",
        coefficients=dict(vars(c)),
    )
    lip = sampled_lipschitz(model, params)
    if lip > lipschitz_budget:
        raise BudgetExceeded(
            f"sampled Lipschitz constant {lip:.3g} exceeds budget {lipschitz_budget:.3g}"
        )
    return model


def zero_remainder_model(params: ModelParams) -> RemainderModel:
    """``xi == 0`` with ``Lop = gamma Q``: the simplified dynamics."""
    d = params.d_R

    def zero_scalar(g, mu, R):
        return np.zeros(np.shape(g))

    def zero_vec(g, mu, R):
        return np.zeros(np.shape(g) + (d,))

    return RemainderModel(
        xi_g=zero_scalar,
        xi_mu=zero_scalar,
        xi_R=zero_vec,
        L_op=_contraction(params, 0.0),
        d_R=d,
        lipschitz_budget=0.0,
        name="zero",
    )


def working_box(params: ModelParams) -> dict:
    gs = params.derived.g_star_bar
    return {"g": (0.0, 2.0 * gs), "mu": (-gs, gs), "R_radius": gs}


def max_slope(fn: Callable, grid) -> float:
    """Largest secant slope of a scalar function between neighbouring grid points."""
    x = np.asarray(grid, dtype=float)
    y = np.asarray(fn(x), dtype=float)
    return float(np.max(np.abs(np.diff(y) / np.diff(x))))


def sampled_lipschitz(rem: RemainderModel, params: ModelParams, n_g: int = 33, seed: int = 0) -> float:
    """Largest spectral norm of the Jacobian of ``(xi_g, xi_mu, xi_R)`` over the working box.

    The box is sampled on a grid in ``g``, a few ``mu`` levels and a
    deterministic set of ``R`` points inside the ball.
    """
    box = working_box(params)
    d = params.d_R
    rng = np.random.default_rng(seed)
    gs = np.linspace(*box["g"], n_g)
    mus = np.linspace(*box["mu"], 5)
    dirs = rng.standard_normal((4, d)) if d else np.zeros((4, 0))
    if d:
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    Rs = np.vstack([np.zeros((1, d)), box["R_radius"] * dirs])
    G, M, K = np.meshgrid(gs, mus, np.arange(len(Rs)), indexing="ij")
    pts = np.column_stack([G.ravel(), M.ravel(), Rs[K.ravel()]])

    def xi(p):
        g, mu, R = p[:, 0], p[:, 1], p[:, 2:]
        return np.column_stack([rem.xi_g(g, mu, R), rem.xi_mu(g, mu, R), rem.xi_R(g, mu, R)])

    dim = 2 + d
    h = 1e-7
    jac = np.empty((len(pts), dim, dim))
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = h
        jac[:, :, j] = (xi(pts + e) - xi(pts - e)) / (2 * h)
    return float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))))


def bms_step(state: RGState, params: ModelParams, rem: RemainderModel) -> RGState:
    """Apply the truncated RG map once."""
    g, mu, R = state.g, state.mu, state.R
    if R.size != rem.d_R:
        raise InvalidParams(f"state has d_R={R.size}, remainder model expects {rem.d_R}")
    dc = params.derived
    g_new = f_simplified(g, params) + float(rem.xi_g(g, mu, R))
    mu_new = dc.lambda_mu * mu + float(rem.xi_mu(g, mu, R))
    R_new = rem.apply_L(g, mu, R) + np.asarray(rem.xi_R(g, mu, R), dtype=float).reshape(-1)
    if not (math.isfinite(g_new) and math.isfinite(mu_new) and np.all(np.isfinite(R_new))):
        raise NonFinite("bms_step produced a non-finite state")
    return RGState(g_new, mu_new, R_new)


def bms_step_vector(x: np.ndarray, params: ModelParams, rem: RemainderModel) -> np.ndarray:
    return bms_step(RGState.from_vector(x), params, rem).as_vector()
