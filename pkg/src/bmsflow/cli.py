"""Command-line drivers: ``orbit``, ``spectrum``, ``hier flow|critical|fixed-point``, ``sweep``.

Every output file starts with a provenance record (artifact version, command
and the fully resolved configuration).  Files are written to a temporary name
and renamed into place, so a failed run leaves no partial output.  Exit codes:
0 success, 2 invalid input or configuration, 3 numerical failure; on failure a
one-line JSON object ``{"error", "message", "exit_code"}`` goes to stderr.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import BMSFlowError, ConfigError, SweepFailed
from .hierarchical import (
    PotentialCoeffs,
    critical_mu_search,
    flow,
    hier_fixed_point,
    rg_step_tangent,
)
from .orbit import extend_window, residuals, solve_heteroclinic
from .schemas import SWEEP_COLUMNS
from .spectral import (
    approximate_ir_point,
    eigen,
    gaussian_point,
    ir_fixed_point,
    spectral_report,
)

log = logging.getLogger("bmsflow")

TRAJECTORY_COLUMNS = ["n", "g_bar", "dg", "g", "mu", "R_norm"]


# ---------------------------------------------------------------- output helpers

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, NaN/inf to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def provenance(command: str, cfg: RunConfig) -> dict:
    return {"artifact": "bmsflow", "version": __version__, "command": command,
            "config": _clean(cfg.data)}


def write_atomic(path: Path, text: str):
    """Write UTF-8 text with LF endings via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def json_text(obj) -> str:
    return json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n"


def csv_text(prov: dict, columns: list, rows, summary: dict | None = None) -> str:
    lines = ["# provenance: " + json.dumps(_clean(prov), sort_keys=True, separators=(",", ":"))]
    if summary is not None:
        lines.append("# summary: " + json.dumps(_clean(summary), sort_keys=True,
                                                separators=(",", ":")))
    lines.append(",".join(columns))
    lines.extend(",".join(_fmt(x) for x in row) for row in rows)
    return "\n".join(lines) + "\n"


def write_table(out_dir: Path, stem: str, fmt: str, prov: dict, columns: list, rows,
                summary: dict | None = None) -> Path:
    rows = [list(r) for r in rows]
    if fmt == "csv":
        path = out_dir / f"{stem}.csv"
        write_atomic(path, csv_text(prov, columns, rows, summary))
    else:
        path = out_dir / f"{stem}.json"
        body = {"provenance": prov, "columns": columns, "rows": rows}
        if summary is not None:
            body.update(summary)
        write_atomic(path, json_text(body))
    return path


def _eig_list(lam) -> list:
    return [{"re": float(z.real), "im": float(z.imag), "abs": float(abs(z))} for z in lam]


# ---------------------------------------------------------------- commands

def cmd_orbit(cfg: RunConfig) -> list[Path]:
    exp, out = cfg["experiment"], Path(cfg["output"]["dir"])
    params, rem = cfg.model_and_remainder()
    solver = cfg.solver_config()
    N = exp["window"]
    sol = solve_heteroclinic(exp["omega0"], -N, N, params, rem, solver)
    diag = sol.diagnostics
    if exp["window_estimate"]:
        wider = extend_window(sol, -2 * N, 2 * N, params, rem, solver)
        diag.window_truncation_estimate = wider.diagnostics.window_truncation_estimate
    res = residuals(sol.trajectory(), params, rem)
    R_norm = np.linalg.norm(sol.R, axis=1) if sol.R.shape[1] else np.zeros(len(sol.n))
    rows = zip(sol.n, sol.backbone.g_bar, sol.deviations.dg, sol.g, sol.mu, R_norm)
    prov = provenance("orbit", cfg)
    paths = [write_table(out, "trajectory", cfg["output"]["format"], prov, TRAJECTORY_COLUMNS, rows)]
    report = {"provenance": prov, "omega0": exp["omega0"], "window": [-N, N],
              "diagnostics": diag.to_dict(), "residuals": res}
    paths.append(out / "diagnostics.json")
    write_atomic(paths[-1], json_text(report))
    return paths


def cmd_spectrum(cfg: RunConfig) -> list[Path]:
    point_name = cfg["experiment"]["point"]
    params, rem = cfg.model_and_remainder()
    start = gaussian_point(params) if point_name == "gaussian" else approximate_ir_point(params)
    report = spectral_report(start, params, rem)
    body = {"provenance": provenance("spectrum", cfg), "point": point_name, **report.to_dict()}
    path = Path(cfg["output"]["dir"]) / f"spectrum_{point_name}.json"
    write_atomic(path, json_text(body))
    return [path]


def cmd_hier_flow(cfg: RunConfig) -> list[Path]:
    exp, hp = cfg["experiment"], cfg.hier_params()
    V0 = PotentialCoeffs.from_couplings(exp["g0"], exp["mu0"], hp.m)
    res = flow(V0, exp["steps"], hp, escape_mu=exp["escape_mu"])
    columns = ["n", "g", "mu"] + [f"v{k}" for k in hp.degrees]
    rows = [[n, row[1], row[0], *row] for n, row in enumerate(res.coeffs)]
    stop = {"stop": {"escaped_at": res.escaped_at, "reason": res.reason}}
    return [write_table(Path(cfg["output"]["dir"]), "hier_flow", cfg["output"]["format"],
                        provenance("hier flow", cfg), columns, rows, stop)]


def cmd_hier_critical(cfg: RunConfig) -> list[Path]:
    exp, hp = cfg["experiment"], cfg.hier_params()
    res = critical_mu_search(exp["g0"], hp, max_steps=exp["max_steps"],
                             bracket=tuple(exp["bracket"]), escape_mu=exp["escape_mu"])
    prov = provenance("hier critical", cfg)
    out = Path(cfg["output"]["dir"])
    summary = {"g0": exp["g0"], "mu0_critical": res.mu0_critical, "width": res.width}
    if cfg["output"]["format"] == "json":
        path = out / "hier_critical.json"
        write_atomic(path, json_text({"provenance": prov, **summary,
                                      "history": [list(h) for h in res.history]}))
        return [path]
    rows = [[i + 1, lo, hi] for i, (lo, hi) in enumerate(res.history)]
    return [write_table(out, "hier_critical", "csv", prov, ["iteration", "lo", "hi"], rows, summary)]


def cmd_hier_fixed_point(cfg: RunConfig) -> list[Path]:
    hp = cfg.hier_params()
    fp = hier_fixed_point(hp)
    _, J = rg_step_tangent(fp, hp)
    lam, _ = eigen(J)
    mod = np.abs(lam)
    expanding = lam[mod > 1.0]
    nu = math.log(hp.L) / math.log(abs(expanding[0])) if expanding.size == 1 else None
    body = {
        "provenance": provenance("hier fixed-point", cfg),
        "coefficients": fp.v,
        "g": fp.v[1],
        "mu": fp.v[0],
        "eigenvalues": _eig_list(lam),
        "classification": {"expanding": int(np.sum(mod > 1.0)),
                           "contracting": int(np.sum(mod < 1.0))},
        "nu": nu,
        "projection_misfit": fp.projection_misfit,
    }
    path = Path(cfg["output"]["dir"]) / "hier_fixed_point.json"
    write_atomic(path, json_text(body))
    return [path]


def sweep_point(data: dict, omega0: float, epsilon: float) -> list:
    """One sweep row; failures are reported in the row instead of raised."""
    row = [omega0, epsilon, False, None, None, None, None, None, None, None]
    try:
        cfg = RunConfig.from_dict(data).with_overrides(
            {"model": {"epsilon": epsilon}, "hier": {"epsilon": epsilon}})
        params, rem = cfg.model_and_remainder()
        N = cfg["experiment"]["window"]
        sol = solve_heteroclinic(omega0, -N, N, params, rem, cfg.solver_config())
        d = sol.diagnostics
        fp = ir_fixed_point(params, rem)
        end = np.concatenate(([sol.g[-1], sol.mu[-1]], sol.R[-1]))
        ratios = d.contraction_ratio_estimates
        row[2:] = [True, None, d.iterations_used, d.final_residuals["g"],
                   d.final_residuals["mu"], d.final_residuals["R"],
                   max(ratios) if ratios else None,
                   float(np.max(np.abs(end - fp.as_vector())))]
    except BMSFlowError as exc:
        row[3] = exc.tag
    return row


def cmd_sweep(cfg: RunConfig) -> list[Path]:
    exp = cfg["experiment"]
    omegas = [float(x) for x in exp["sweep_omega0"]]
    epsilons = [float(x) for x in exp["sweep_epsilon"]] or [float(cfg["model"]["epsilon"])]
    grid = sorted(itertools.product(omegas, epsilons))
    if not grid:
        raise ConfigError("sweep grid is empty")
    if exp["jobs"] > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=exp["jobs"]) as pool:
            rows = list(pool.map(sweep_point, itertools.repeat(cfg.data), *zip(*grid)))
    else:
        rows = [sweep_point(cfg.data, w, e) for w, e in grid]
    rows.sort(key=lambda r: (r[0], r[1]))
    path = write_table(Path(cfg["output"]["dir"]), "sweep", cfg["output"]["format"],
                       provenance("sweep", cfg), SWEEP_COLUMNS, rows)
    if not any(r[2] for r in rows):
        raise SweepFailed(f"all {len(rows)} grid points failed; table written to {path}")
    return [path]


# ---------------------------------------------------------------- argument parsing

def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--epsilon", type=float, help="override model and hier epsilon")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--format", choices=["csv", "json"], help="table format")
    common.add_argument("--strict", action=argparse.BooleanOptionalAction, default=None,
                        help="restrict omega0 to (0, 1/2)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="bmsflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"bmsflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("orbit", parents=[common], help="solve the complete trajectory")
    p.add_argument("--omega0", type=float)
    p.add_argument("--window", type=int, help="solve on [-N, N]")
    p.set_defaults(func=cmd_orbit)

    p = sub.add_parser("spectrum", parents=[common], help="fixed point and linearization")
    p.add_argument("--point", choices=["gaussian", "ir"])
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("hier", help="hierarchical backend")
    hsub = p.add_subparsers(dest="hier_command", required=True)
    h = hsub.add_parser("flow", parents=[common], help="iterate the RG step")
    h.add_argument("--g0", type=float)
    h.add_argument("--mu0", type=float)
    h.add_argument("--steps", type=int)
    h.set_defaults(func=cmd_hier_flow)
    h = hsub.add_parser("critical", parents=[common], help="bisect for the critical mass")
    h.add_argument("--g0", type=float)
    h.add_argument("--max-steps", type=int, dest="max_steps")
    h.set_defaults(func=cmd_hier_critical)
    h = hsub.add_parser("fixed-point", parents=[common], help="nontrivial fixed point")
    h.set_defaults(func=cmd_hier_fixed_point)

    p = sub.add_parser("sweep", parents=[common], help="grid of orbit solves")
    p.add_argument("--omega0-grid", type=_float_list, dest="sweep_omega0")
    p.add_argument("--epsilon-grid", type=_float_list, dest="sweep_epsilon")
    p.add_argument("--window", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict()
    over: dict = {}
    if args.epsilon is not None:
        over["model"] = {"epsilon": args.epsilon}
        over["hier"] = {"epsilon": args.epsilon}
    if args.strict is not None:
        over["solver"] = {"strict_omega_domain": args.strict}
    output = {k: v for k, v in (("dir", args.out), ("format", args.format)) if v is not None}
    if output:
        over["output"] = output
    exp = {}
    for key in ("omega0", "window", "point", "g0", "mu0", "steps", "max_steps",
                "sweep_omega0", "sweep_epsilon", "jobs"):
        val = getattr(args, key, None)
        if val is not None:
            exp[key] = val
    if exp:
        over["experiment"] = exp
    return cfg.with_overrides(over) if over else cfg


def _report_error(tag: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": tag, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        for path in args.func(cfg):
            print(path)
    except BMSFlowError as exc:
        return _report_error(exc.tag, str(exc), exc.exit_code)
    except OSError as exc:
        return _report_error(type(exc).__name__, str(exc), 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
