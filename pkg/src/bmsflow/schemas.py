"""JSON Schemas (draft 2020-12) of the reports written by the command line."""

_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}
_INT = {"type": "integer"}

PROVENANCE = {
    "type": "object",
    "required": ["artifact", "version", "command", "config"],
    "properties": {
        "artifact": {"const": "bmsflow"},
        "version": {"type": "string"},
        "command": {"type": "string"},
        "config": {"type": "object"},
    },
}


def _report(body_required: list, body_props: dict) -> dict:
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "type": "object",
        "required": ["provenance"] + body_required,
        "properties": {"provenance": PROVENANCE, **body_props},
    }


_EIGENVALUE = {
    "type": "object",
    "required": ["re", "im", "abs"],
    "properties": {"re": _NUM, "im": _NUM, "abs": _NUM},
}

DIAGNOSTICS = _report(
    ["diagnostics", "residuals", "window"],
    {
        "window": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2},
        "omega0": _NUM,
        "diagnostics": {
            "type": "object",
            "required": ["contraction_ratio_estimates", "final_residuals", "iterations_used",
                         "window_truncation_estimate", "tail_pad", "changes"],
            "properties": {
                "contraction_ratio_estimates": {"type": "array", "items": _NUM},
                "final_residuals": {"type": "object", "additionalProperties": _NUM},
                "iterations_used": _INT,
                "window_truncation_estimate": _NUM_OR_NULL,
                "tail_pad": _INT,
                "changes": {"type": "array", "items": _NUM},
            },
        },
        "residuals": {
            "type": "object",
            "required": ["g", "mu", "R", "dg0"],
            "additionalProperties": _NUM,
        },
    },
)

TRAJECTORY = _report(
    ["columns", "rows"],
    {
        "columns": {"const": ["n", "g_bar", "dg", "g", "mu", "R_norm"]},
        "rows": {
            "type": "array",
            "items": {"type": "array", "prefixItems": [_INT] + [_NUM] * 5,
                      "minItems": 6, "maxItems": 6},
        },
    },
)

SPECTRUM = _report(
    ["point", "fixed_point", "eigenvalues", "exponents", "classification"],
    {
        "point": {"enum": ["gaussian", "ir"]},
        "fixed_point": {
            "type": "object",
            "required": ["g", "mu", "R"],
            "properties": {"g": _NUM, "mu": _NUM, "R": {"type": "array", "items": _NUM}},
        },
        "eigenvalues": {"type": "array", "items": _EIGENVALUE},
        "exponents": {
            "type": "object",
            "required": ["nu", "omega_corr"],
            "properties": {"nu": _NUM_OR_NULL, "omega_corr": _NUM_OR_NULL},
        },
        "classification": {
            "type": "object",
            "required": ["expanding", "contracting"],
            "properties": {"expanding": _INT, "contracting": _INT},
        },
    },
)

HIER_FLOW = _report(
    ["columns", "rows", "stop"],
    {
        "columns": {"type": "array", "items": {"type": "string"}},
        "rows": {"type": "array", "items": {"type": "array", "items": _NUM}},
        "stop": {
            "type": "object",
            "required": ["escaped_at", "reason"],
            "properties": {"escaped_at": {"type": ["integer", "null"]},
                           "reason": {"type": ["string", "null"]}},
        },
    },
)

HIER_CRITICAL = _report(
    ["g0", "mu0_critical", "width", "history"],
    {
        "g0": _NUM,
        "mu0_critical": _NUM,
        "width": _NUM,
        "history": {"type": "array",
                    "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
    },
)

HIER_FIXED_POINT = _report(
    ["coefficients", "g", "mu", "eigenvalues", "classification", "nu", "projection_misfit"],
    {
        "coefficients": {"type": "array", "items": _NUM},
        "g": _NUM,
        "mu": _NUM,
        "eigenvalues": {"type": "array", "items": _EIGENVALUE},
        "classification": SPECTRUM["properties"]["classification"],
        "nu": _NUM_OR_NULL,
        "projection_misfit": _NUM,
    },
)

SWEEP_COLUMNS = ["omega0", "epsilon", "converged", "error", "iterations", "residual_g",
                 "residual_mu", "residual_R", "contraction_ratio", "endpoint_distance"]

SWEEP = _report(
    ["columns", "rows"],
    {
        "columns": {"const": SWEEP_COLUMNS},
        "rows": {
            "type": "array",
            "items": {
                "type": "array",
                "prefixItems": [_NUM, _NUM, {"type": "boolean"}, {"type": ["string", "null"]},
                                {"type": ["integer", "null"]}] + [_NUM_OR_NULL] * 5,
                "minItems": 10,
                "maxItems": 10,
            },
        },
    },
)

SCHEMAS = {
    "diagnostics": DIAGNOSTICS,
    "trajectory": TRAJECTORY,
    "spectrum": SPECTRUM,
    "hier_flow": HIER_FLOW,
    "hier_critical": HIER_CRITICAL,
    "hier_fixed_point": HIER_FIXED_POINT,
    "sweep": SWEEP,
}
