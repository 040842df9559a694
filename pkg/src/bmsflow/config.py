"""Run configuration: JSON sections merged over documented defaults.

Sections and their defaults::

    model       L=2.0, epsilon=0.1, a=null (ln L), gamma=0.5, d_R=3, epsilon_max=0.5
    remainder   name="cubic" (or "zero", "hierarchical"), lipschitz_budget=1.0,
                coefficients={c_g: 1, c_gR: 0.5, c_mu: 1, c_muR: 0.5, c_R: 1, modulation: 0}
    solver      tol_residual=1e-10, max_picard_iters=200, weight_exponents=[1, 2, 3],
                strict_omega_domain=true, tail_pad=null, tail_tol=1e-12, method="picard"
    hier        L=2, d=3, epsilon=0.1, m=4, q=64, sigma_gamma_sq=null
    experiment  omega0=0.25, window=100, window_estimate=true, point="ir",
                g0=0.001, mu0=0.0, steps=50, max_steps=200, bracket=[-0.2, 0.2],
                escape_mu=0.5, sweep_omega0=[0.1, 0.2, 0.3, 0.4], sweep_epsilon=[], jobs=1
    output      dir=".", format="csv"

Unknown sections or keys raise :class:`~bmsflow.errors.ConfigError`.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import BMSFlowError, ConfigError
from .hierarchical import HierParams, hierarchical_remainder_model
from .model import CubicCoefficients, ModelParams, default_remainder_model, zero_remainder_model
from .orbit import SolverConfig

REMAINDER_NAMES = ("cubic", "zero", "hierarchical")
FORMATS = ("csv", "json")

DEFAULTS: dict = {
    "model": {f.name: f.default for f in fields(ModelParams)},
    "remainder": {
        "name": "cubic",
        "lipschitz_budget": 1.0,
        "coefficients": asdict(CubicCoefficients()),
    },
    "solver": {
        **{f.name: f.default for f in fields(SolverConfig)},
        "weight_exponents": [1.0, 2.0, 3.0],
    },
    "hier": {f.name: f.default for f in fields(HierParams)},
    "experiment": {
        "omega0": 0.25,
        "window": 100,
        "window_estimate": True,
        "point": "ir",
        "g0": 1e-3,
        "mu0": 0.0,
        "steps": 50,
        "max_steps": 200,
        "bracket": [-0.2, 0.2],
        "escape_mu": 0.5,
        "sweep_omega0": [0.1, 0.2, 0.3, 0.4],
        "sweep_epsilon": [],
        "jobs": 1,
    },
    "output": {"dir": ".", "format": "csv"},
}


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration (every key present)."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict | None = None) -> "RunConfig":
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        cfg = cls(_merge(DEFAULTS, raw, ""))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return RunConfig.from_dict(_merge(self.data, overrides, ""))

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def validate(self):
        """Build every typed object once so bad values fail before any work starts."""
        self.model_params()
        self.solver_config()
        self.hier_params()
        rem = self["remainder"]
        if rem["name"] not in REMAINDER_NAMES:
            raise ConfigError(f"remainder.name must be one of {REMAINDER_NAMES}")
        self.cubic_coefficients()
        if self["output"]["format"] not in FORMATS:
            raise ConfigError(f"output.format must be one of {FORMATS}")
        exp = self["experiment"]
        if exp["point"] not in ("gaussian", "ir"):
            raise ConfigError("experiment.point must be 'gaussian' or 'ir'")
        for key in ("window", "steps", "max_steps", "jobs"):
            if not isinstance(exp[key], int) or isinstance(exp[key], bool) or exp[key] < 1:
                raise ConfigError(f"experiment.{key} must be a positive integer")
        if len(exp["bracket"]) != 2:
            raise ConfigError("experiment.bracket needs two entries")

    def _build(self, cls, section: str, values: dict):
        try:
            return cls(**values)
        except BMSFlowError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {section} section: {exc}") from exc

    def model_params(self) -> ModelParams:
        return self._build(ModelParams, "model", self["model"])

    def solver_config(self) -> SolverConfig:
        return self._build(SolverConfig, "solver", self["solver"])

    def hier_params(self) -> HierParams:
        return self._build(HierParams, "hier", self["hier"])

    def cubic_coefficients(self) -> CubicCoefficients:
        return self._build(CubicCoefficients, "remainder.coefficients",
                           self["remainder"]["coefficients"])

    def model_and_remainder(self):
        """``(ModelParams, RemainderModel)`` for the configured remainder."""
        rem = self["remainder"]
        if rem["name"] == "hierarchical":
            return hierarchical_remainder_model(self.hier_params())
        params = self.model_params()
        if rem["name"] == "zero":
            return params, zero_remainder_model(params)
        return params, default_remainder_model(params, self.cubic_coefficients(),
                                               lipschitz_budget=rem["lipschitz_budget"])
