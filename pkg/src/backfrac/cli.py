"""Batch command-line front end for the backward-diffusion toolkit.

Four subcommands cover the library surface:

* ``mlf``       -- tabulate Mittag-Leffler values with their certified
                   decay envelope (no config needed)
* ``solve``     -- run a forward, backward or semilinear solve from a
                   JSON config and write solution.csv + meta.json
* ``verify``    -- run one named diagnostic (blowup, holder, caputo,
                   decomposition, unbounded, roundtrip, exponents) and
                   write report.json plus plot-ready CSV series
* ``spectrum``  -- build and export the eigensystem described by a config

Configs are flat JSON with a ``schema_version`` field; all randomness
derives from the config seed, numeric CSV cells use the shortest
round-tripping decimal representation, and rerunning a command on the
same config produces byte-identical outputs.

Exit codes: 0 success, 2 parameter/config error, 3 contraction gate
refused, 4 fixed-point divergence, 5 diagnostic failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    BackfracError,
    CertificationError,
    DivergenceError,
    GateRefusedError,
    ParameterError,
    ResolutionError,
)
from .modal import TimeGrid
from .operators import (
    GridFunction,
    LinearProblem,
    grid_function_to_csv,
    solve_backward_linear,
    solve_forward_linear,
    unboundedness_probe,
)
from .picard import (
    BUILTIN_SOURCES,
    Nonlinearity,
    builtin_nonlinearity,
    picard_solve,
    report_to_csv,
    report_to_json,
)
from .special import certify_ml_bounds, mlf
from .spectral import (
    ModalVector,
    OperatorSpec,
    Spectrum,
    eigensystem_analytic,
    eigensystem_discrete,
    spectrum_to_csv,
)
from .verify import (
    REGIMES,
    ExponentSet,
    boundary_perturbations,
    edge_regularity_datum,
    fit_blowup_exponent,
    fit_holder_modulus,
    increment_decomposition,
    roundtrip_experiment,
    sample_exponents,
    spectral_caputo,
    validate_exponents,
)

__all__ = [
    "RunConfig",
    "load_config",
    "config_echo",
    "build_spectrum",
    "build_grid",
    "build_datum",
    "build_source",
    "cmd_mlf",
    "cmd_solve",
    "cmd_verify",
    "cmd_spectrum",
    "main",
]

SCHEMA_VERSION = 1

_REQUIRED = object()


# ---------------------------------------------------------------------------
# config parsing


@dataclass(frozen=True)
class RunConfig:
    """Parsed and normalised run configuration.

    `raw` is the canonical dict: loading it again reproduces exactly the
    same structure, which is the config round-trip contract.  The other
    fields are typed views used by the command drivers.
    """

    raw: dict
    alpha: float
    beta: float
    T: float
    operator: dict
    truncation: int
    grid_spec: dict
    phi_spec: dict | None
    u0_spec: dict | None
    source_spec: dict
    exponents: ExponentSet | None
    seed: int
    output_dir: str
    options: dict


def _known_keys(block: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(block) - allowed)
    if extra:
        raise ParameterError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _get(block: dict, key: str, kind, where: str, default=_REQUIRED, choices=None):
    if key not in block or block[key] is None:
        if default is _REQUIRED:
            raise ParameterError(f"missing required entry {where}.{key}")
        return default
    val = block[key]
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ParameterError(f"{where}.{key} must be a number, got {val!r}")
        val = float(val)
    elif kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ParameterError(f"{where}.{key} must be an integer, got {val!r}")
    elif kind is str:
        if not isinstance(val, str):
            raise ParameterError(f"{where}.{key} must be a string, got {val!r}")
    elif kind is dict:
        if not isinstance(val, dict):
            raise ParameterError(f"{where}.{key} must be an object, got {val!r}")
    elif kind is bool:
        if not isinstance(val, bool):
            raise ParameterError(f"{where}.{key} must be true or false, got {val!r}")
    elif kind is list:
        if not isinstance(val, list):
            raise ParameterError(f"{where}.{key} must be an array, got {val!r}")
    if choices is not None and val not in choices:
        raise ParameterError(
            f"{where}.{key} must be one of {', '.join(map(str, choices))}, got {val!r}"
        )
    return val


def _parse_datum(block, n_modes: int, where: str) -> dict | None:
    if block is None:
        return None
    if not isinstance(block, dict):
        raise ParameterError(f"{where} must be an object")
    _known_keys(block, {"mode", "law"}, where)
    if ("mode" in block) == ("law" in block):
        raise ParameterError(f"{where} needs exactly one of 'mode' or 'law'")
    if "mode" in block:
        coeffs = _get(block, "mode", list, where)
        if len(coeffs) != n_modes:
            raise ParameterError(
                f"{where}.mode has {len(coeffs)} coefficients for "
                f"{n_modes} modes"
            )
        try:
            vals = [float(c) for c in coeffs]
        except (TypeError, ValueError):
            raise ParameterError(f"{where}.mode must contain numbers") from None
        return {"mode": vals}
    law = _get(block, "law", dict, where)
    _known_keys(law, {"gamma", "epsilon"}, f"{where}.law")
    gamma = _get(law, "gamma", float, f"{where}.law")
    epsilon = _get(law, "epsilon", float, f"{where}.law")
    if not (epsilon > 0.0):
        raise ParameterError(f"{where}.law.epsilon must be > 0, got {epsilon}")
    return {"law": {"gamma": gamma, "epsilon": epsilon}}


def _parse_source(block, n_modes: int, n_steps: int, where: str) -> dict:
    if block is None:
        return {"kind": "none"}
    if not isinstance(block, dict):
        raise ParameterError(f"{where} must be an object")
    kind = _get(block, "kind", str, where, choices=("none", "linear", "nonlinear"))
    if kind == "none":
        _known_keys(block, {"kind"}, where)
        return {"kind": "none"}
    if kind == "linear":
        _known_keys(block, {"kind", "table", "expression"}, where)
        if ("table" in block) == ("expression" in block):
            raise ParameterError(
                f"{where} with kind 'linear' needs exactly one of "
                "'table' or 'expression'"
            )
        if "expression" in block:
            formula = _get(block, "expression", str, where)
            if "__" in formula:
                raise ParameterError(
                    f"{where}.expression must not contain dunder names"
                )
            return {"kind": "linear", "expression": formula}
        table = _get(block, "table", list, where)
        if len(table) != n_steps + 1:
            raise ParameterError(
                f"{where}.table has {len(table)} rows for a grid with "
                f"{n_steps + 1} nodes"
            )
        rows = []
        for i, row in enumerate(table):
            if not isinstance(row, list) or len(row) != n_modes:
                raise ParameterError(
                    f"{where}.table row {i} must be an array of "
                    f"{n_modes} numbers"
                )
            try:
                rows.append([float(v) for v in row])
            except (TypeError, ValueError):
                raise ParameterError(
                    f"{where}.table row {i} must contain numbers"
                ) from None
        return {"kind": "linear", "table": rows}
    _known_keys(block, {"kind", "builtin", "K", "params"}, where)
    builtin = _get(block, "builtin", str, where, choices=tuple(sorted(BUILTIN_SOURCES)))
    spec: dict = {"kind": "nonlinear", "builtin": builtin}
    if "params" in block:
        params = _get(block, "params", dict, where)
        clean = {}
        for k, v in params.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ParameterError(
                    f"{where}.params.{k} must be a number, got {v!r}"
                )
            clean[str(k)] = float(v)
        spec["params"] = clean
    if "K" in block:
        declared = _get(block, "K", float, where)
        if not (declared >= 0.0):
            raise ParameterError(f"{where}.K must be >= 0, got {declared}")
        spec["K"] = declared
    return spec


def _parse_exponents(block, alpha: float) -> tuple[ExponentSet, dict]:
    where = "exponents"
    if not isinstance(block, dict):
        raise ParameterError(f"{where} must be an object")
    allowed = {
        "alpha", "regime", "p", "q", "r", "s",
        "p_prime", "q_prime", "p_hat", "q_hat", "r_hat",
    }
    _known_keys(block, allowed, where)
    e_alpha = _get(block, "alpha", float, where, default=alpha)
    if abs(e_alpha - alpha) > 1e-12:
        raise ParameterError(
            f"exponents.alpha = {e_alpha} differs from problem.alpha = {alpha}"
        )
    regime = _get(block, "regime", str, where, default="R_linear", choices=REGIMES)
    fields = {}
    for name in ("p", "q", "r", "s", "p_prime", "q_prime", "p_hat", "q_hat", "r_hat"):
        if name in block and block[name] is not None:
            fields[name] = _get(block, name, float, where)
    exps = ExponentSet(alpha=e_alpha, regime=regime, **fields)
    issues = validate_exponents(exps)
    if issues:
        raise ParameterError(
            "exponents violate their regime constraints: " + "; ".join(issues)
        )
    return exps, {"alpha": e_alpha, "regime": regime, **fields}


def load_config(source) -> RunConfig:
    """Parse a config from a JSON file path or an already-loaded dict.

    Validation is strict: unknown keys, malformed types, inconsistent
    cross-field combinations (datum length vs truncation, source table
    shape vs grid, truncation vs mesh resolution) and exponent-regime
    violations are all refused here, before any computation starts.
    """
    if isinstance(source, dict):
        data = source
    else:
        path = Path(source)
        if not path.exists():
            raise ParameterError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ParameterError("config root must be a JSON object")
    _known_keys(data, {"schema_version", "problem", "data", "exponents", "run"},
                "config")
    version = _get(data, "schema_version", int, "config")
    if version != SCHEMA_VERSION:
        raise ParameterError(
            f"unsupported schema_version {version}; this build reads "
            f"version {SCHEMA_VERSION}"
        )

    problem = _get(data, "problem", dict, "config")
    _known_keys(problem, {"alpha", "beta", "T", "operator", "truncation", "grid"},
                "problem")
    alpha = _get(problem, "alpha", float, "problem")
    beta = _get(problem, "beta", float, "problem")
    horizon = _get(problem, "T", float, "problem")

    op_in = _get(problem, "operator", dict, "problem", default={})
    _known_keys(
        op_in,
        {"kind", "domain_length", "mesh_points", "diffusion", "potential",
         "boundary", "robin_kappa"},
        "problem.operator",
    )
    operator = {
        "kind": _get(op_in, "kind", str, "problem.operator",
                     default="analytic", choices=("analytic", "discrete")),
        "domain_length": _get(op_in, "domain_length", float, "problem.operator",
                              default=math.pi),
        "mesh_points": _get(op_in, "mesh_points", int, "problem.operator",
                            default=None),
        "diffusion": _get(op_in, "diffusion", float, "problem.operator",
                          default=1.0),
        "potential": _get(op_in, "potential", float, "problem.operator",
                          default=0.0),
        "boundary": _get(op_in, "boundary", str, "problem.operator",
                         default="dirichlet", choices=("dirichlet", "robin")),
        "robin_kappa": _get(op_in, "robin_kappa", float, "problem.operator",
                            default=0.0),
    }

    truncation = _get(problem, "truncation", int, "problem")
    if truncation < 1:
        raise ParameterError(f"problem.truncation must be >= 1, got {truncation}")

    # re-state the builders' resolution guards at the load boundary so a
    # bad config fails before any eigensolve starts
    mesh = operator["mesh_points"]
    if operator["kind"] == "discrete":
        if mesh is None:
            raise ParameterError("a discrete operator needs problem.operator.mesh_points")
        if mesh < 3 * truncation:
            raise ResolutionError(
                f"mesh_points = {mesh} < 3 * truncation = {3 * truncation}: "
                "top modes would be unresolved"
            )
    elif mesh is not None and mesh != 0 and mesh < truncation + 2:
        raise ResolutionError(
            f"mesh_points = {mesh} too coarse for {truncation} modes "
            f"(need >= {truncation + 2})"
        )

    grid_in = _get(problem, "grid", dict, "problem", default={})
    _known_keys(grid_in, {"K", "spacing", "grade"}, "problem.grid")
    n_steps = _get(grid_in, "K", int, "problem.grid", default=256)
    if n_steps < 1:
        raise ParameterError(f"problem.grid.K must be >= 1, got {n_steps}")
    spacing = _get(grid_in, "spacing", str, "problem.grid",
                   default="uniform", choices=("uniform", "graded"))
    grid_spec: dict = {"K": n_steps, "spacing": spacing}
    if spacing == "graded":
        grade = _get(grid_in, "grade", float, "problem.grid")
        if not (grade > 0.0):
            raise ParameterError(f"problem.grid.grade must be > 0, got {grade}")
        grid_spec["grade"] = grade
    elif "grade" in grid_in:
        raise ParameterError("problem.grid.grade is only meaningful with graded spacing")

    data_in = _get(data, "data", dict, "config", default={})
    _known_keys(data_in, {"phi", "u0", "source"}, "data")
    phi_spec = _parse_datum(data_in.get("phi"), truncation, "data.phi")
    u0_spec = _parse_datum(data_in.get("u0"), truncation, "data.u0")
    source_spec = _parse_source(data_in.get("source"), truncation, n_steps,
                                "data.source")

    exponents = None
    exps_raw = None
    if data.get("exponents") is not None:
        exponents, exps_raw = _parse_exponents(data["exponents"], alpha)

    run_in = _get(data, "run", dict, "config", default={})
    seed = _get(run_in, "seed", int, "run", default=0)
    output_dir = _get(run_in, "output_dir", str, "run", default="out")
    options = {k: v for k, v in run_in.items() if k not in ("seed", "output_dir")}

    raw = {
        "schema_version": SCHEMA_VERSION,
        "problem": {
            "alpha": alpha,
            "beta": beta,
            "T": horizon,
            "operator": operator,
            "truncation": truncation,
            "grid": grid_spec,
        },
        "data": {
            "phi": phi_spec,
            "u0": u0_spec,
            "source": source_spec,
        },
        "exponents": exps_raw,
        "run": {"seed": seed, "output_dir": output_dir, **options},
    }
    return RunConfig(
        raw=raw,
        alpha=alpha,
        beta=beta,
        T=horizon,
        operator=operator,
        truncation=truncation,
        grid_spec=grid_spec,
        phi_spec=phi_spec,
        u0_spec=u0_spec,
        source_spec=source_spec,
        exponents=exponents,
        seed=seed,
        output_dir=output_dir,
        options=options,
    )


def config_echo(cfg: RunConfig) -> str:
    """Canonical JSON text of a parsed config; load(echo(load(x))) == load(x)."""
    return _json_text(cfg.raw)


# ---------------------------------------------------------------------------
# builders


def build_spectrum(cfg: RunConfig) -> Spectrum:
    op = cfg.operator
    if op["kind"] == "analytic":
        if (op["diffusion"] != 1.0 or op["potential"] != 0.0
                or op["boundary"] != "dirichlet"):
            raise ParameterError(
                "analytic eigenpairs require unit diffusion, zero potential "
                "and Dirichlet walls; use an operator of kind 'discrete'"
            )
        return eigensystem_analytic(
            op["domain_length"], cfg.truncation, mesh_points=op["mesh_points"]
        )
    spec = OperatorSpec(
        domain_length=op["domain_length"],
        diffusion=op["diffusion"],
        potential=op["potential"],
        boundary=op["boundary"],
        robin_kappa=op["robin_kappa"],
        beta=cfg.beta,
    )
    return eigensystem_discrete(spec, op["mesh_points"], cfg.truncation)


def build_grid(cfg: RunConfig) -> TimeGrid:
    if cfg.grid_spec["spacing"] == "graded":
        return TimeGrid.graded(cfg.T, cfg.grid_spec["K"], cfg.grid_spec["grade"])
    return TimeGrid.uniform(cfg.T, cfg.grid_spec["K"])


def build_datum(cfg: RunConfig, spectrum: Spectrum, which: str) -> ModalVector:
    spec = cfg.phi_spec if which == "phi" else cfg.u0_spec
    if spec is None:
        raise ParameterError(f"this command needs data.{which}")
    if "mode" in spec:
        return ModalVector(np.asarray(spec["mode"], dtype=float), spectrum.label)
    law = spec["law"]
    return edge_regularity_datum(spectrum, cfg.beta, law["gamma"], law["epsilon"])


_EXPR_NAMES = {
    "pi": math.pi,
    "e": math.e,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "minimum": np.minimum,
    "maximum": np.maximum,
}


def _eval_expression(formula: str, grid: TimeGrid, n_modes: int) -> np.ndarray:
    """Evaluate a source expression of t (node times) and j (mode index)."""
    t = grid.nodes[:, None]
    j = np.arange(1, n_modes + 1, dtype=float)[None, :]
    try:
        vals = eval(  # restricted namespace; dunders are refused at load
            compile(formula, "<source expression>", "eval"),
            {"__builtins__": {}},
            {**_EXPR_NAMES, "t": t, "j": j},
        )
    except Exception as exc:
        raise ParameterError(f"source expression failed to evaluate: {exc}") from None
    arr = np.asarray(vals, dtype=float) * np.ones((grid.nodes.size, n_modes))
    if not np.all(np.isfinite(arr)):
        raise ParameterError("source expression produced non-finite values")
    return arr


def build_source(
    cfg: RunConfig, spectrum: Spectrum, grid: TimeGrid
) -> tuple[GridFunction | None, Nonlinearity | None]:
    """Materialise data.source as either a known forcing or a nonlinearity."""
    src = cfg.source_spec
    if src["kind"] == "none":
        return None, None
    if src["kind"] == "linear":
        if "table" in src:
            arr = np.asarray(src["table"], dtype=float)
        else:
            arr = _eval_expression(src["expression"], grid, spectrum.count)
        return (
            GridFunction(grid, arr, spectrum.label, flags={"kind": "source"}),
            None,
        )
    nl = builtin_nonlinearity(src["builtin"], **src.get("params", {}))
    if "K" in src:
        # the config may declare a more conservative Lipschitz constant
        # than the builtin's own; the gate uses the declared value
        nl = dataclasses.replace(nl, lipschitz_K=src["K"])
    return None, nl


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    return repr(float(x))


def _sanitize(obj):
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _json_text(obj) -> str:
    return json.dumps(_sanitize(obj), indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _series_csv(x_header: str, y_header: str, xs, ys) -> str:
    lines = [f"{x_header},{y_header}"]
    for x, y in zip(xs, ys):
        lines.append(f"{_fmt(x)},{_fmt(y)}")
    return "\n".join(lines) + "\n"


def _opt_float(cfg: RunConfig, key: str, default: float) -> float:
    val = cfg.options.get(key, default)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ParameterError(f"run.{key} must be a number, got {val!r}")
    return float(val)


def _opt_int(cfg: RunConfig, key: str, default: int) -> int:
    val = cfg.options.get(key, default)
    if isinstance(val, bool) or not isinstance(val, int):
        raise ParameterError(f"run.{key} must be an integer, got {val!r}")
    return val


def _problem_block(cfg: RunConfig, spectrum: Spectrum, grid: TimeGrid) -> dict:
    return {
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "T": cfg.T,
        "n_modes": spectrum.count,
        "grid": {"n_steps": grid.n_steps, "kind": grid.kind, "grade": grid.grade},
        "spectrum": spectrum.label,
    }


def _node_norms(coeffs: np.ndarray, spectrum: Spectrum, gamma: float) -> np.ndarray:
    if gamma == 0.0:
        return np.sqrt(np.sum(coeffs**2, axis=1))
    w = spectrum.eigenvalues ** (2.0 * gamma)
    return np.sqrt(np.sum(coeffs**2 * w, axis=1))


# ---------------------------------------------------------------------------
# mlf


def cmd_mlf(a: float, b: float, z_values) -> int:
    """Print a table of E_{a,b}(z) with the certified envelope columns.

    The envelope c/(1+|z|) applies to E_{a,1} with 0 < a < 1 on the
    negative axis; rows outside that range show '-' in the bound columns.
    """
    values = [float(z) for z in z_values]
    bounds = None
    if 0.0 < a < 1.0 and b == 1.0:
        bounds = certify_ml_bounds(a)
    print(f"{'z':>16}  {'E':>18}  {'env_lo':>14}  {'env_hi':>14}")
    for z in values:
        e_val = mlf(a, b, z)
        if bounds is not None and z < 0.0:
            lo = bounds.c_lo / (1.0 + abs(z))
            hi = bounds.c_hi / (1.0 + abs(z))
            lo_s, hi_s = f"{lo:.10g}", f"{hi:.10g}"
        else:
            lo_s, hi_s = "-", "-"
        print(f"{z:>16.10g}  {e_val:>18.10g}  {lo_s:>14}  {hi_s:>14}")
    return 0


# ---------------------------------------------------------------------------
# solve


def cmd_solve(
    cfg: RunConfig,
    out_dir: Path,
    override_flag: bool = False,
    threads: int | None = None,
) -> int:
    """Drive the configured solve and write solution.csv + meta.json."""
    spectrum = build_spectrum(cfg)
    grid = build_grid(cfg)
    direction = cfg.options.get("direction", "backward")
    if direction not in ("backward", "forward"):
        raise ParameterError(
            f"run.direction must be 'backward' or 'forward', got {direction!r}"
        )
    F_gf, nl = build_source(cfg, spectrum, grid)
    constants = None
    report = None

    if direction == "forward":
        if nl is not None:
            raise ParameterError(
                "forward solves support only state-independent sources"
            )
        u0 = build_datum(cfg, spectrum, "u0")
        u = solve_forward_linear(
            spectrum, cfg.alpha, cfg.beta, cfg.T, u0, F=F_gf, grid=grid
        )
        achieved = {
            "initial_gap": float(np.max(np.abs(u.coeffs[0] - u0.coeffs))),
        }
    elif nl is None:
        phi = build_datum(cfg, spectrum, "phi")
        prob = LinearProblem(
            spectrum=spectrum, alpha=cfg.alpha, beta=cfg.beta, T=cfg.T,
            phi=phi, F=F_gf,
        )
        u = solve_backward_linear(prob, None if F_gf is not None else grid)
        achieved = {
            "terminal_gap": float(np.max(np.abs(u.coeffs[-1] - phi.coeffs))),
            "max_amplification": u.flags["max_amplification"],
        }
    else:
        if cfg.exponents is None:
            raise ParameterError("a semilinear solve needs an exponents block")
        phi = build_datum(cfg, spectrum, "phi")
        prob = LinearProblem(
            spectrum=spectrum, alpha=cfg.alpha, beta=cfg.beta, T=cfg.T, phi=phi,
        )
        override = override_flag or bool(cfg.options.get("override_gate", False))
        u, report = picard_solve(
            prob, nl, cfg.exponents,
            grid=grid,
            max_iter=_opt_int(cfg, "max_iter", 100),
            tol=_opt_float(cfg, "tol", 1e-10),
            override_gate=override,
        )
        constants = report.constants
        achieved = {
            "iterations": report.iterations,
            "converged": report.converged,
            "final_distance": report.distances[-1],
            "measured_ratio": report.measured_ratio,
            "tol": report.tol,
        }

    meta = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "command": "solve",
        "direction": direction,
        "config": cfg.raw,
        "problem": _problem_block(cfg, spectrum, grid),
        "flags": dict(u.flags),
        "constants": None if constants is None else {
            "k0": constants.k0,
            "M0": constants.M0,
            "C_tilde0": constants.C_tilde0,
            "C_hat0": constants.C_hat0,
            "inputs": constants.inputs_echo,
        },
        "achieved": achieved,
        "threads": threads,
    }
    _write(out_dir / "solution.csv", grid_function_to_csv(u))
    _write(out_dir / "meta.json", _json_text(meta))
    if report is not None:
        _write(out_dir / "report.json", report_to_json(report) + "\n")
        _write(out_dir / "report.csv", report_to_csv(report))
        _write(
            out_dir / "plotdata" / "picard_distances.csv",
            _series_csv("iteration", "distance",
                        range(1, report.iterations + 1), report.distances),
        )
    else:
        _write(out_dir / "report.json",
               _json_text({"kind": "linear-solve", "achieved": achieved,
                           "flags": dict(u.flags)}))
    norms = _node_norms(u.coeffs, spectrum, 0.0)
    _write(out_dir / "plotdata" / "solution_norm.csv",
           _series_csv("t", "l2_norm", grid.nodes, norms))
    _write(out_dir / "plotdata" / "mode_1.csv",
           _series_csv("t", "u_1", grid.nodes, u.coeffs[:, 0]))
    print(f"solve: wrote {out_dir / 'solution.csv'} "
          f"({spectrum.count} modes x {grid.nodes.size} nodes)")
    return 0


# ---------------------------------------------------------------------------
# verify diagnostics


def _linear_backward(cfg, spectrum, grid, pin_source_grid=False):
    """Backward solve for diagnostics; refuses state-dependent sources."""
    F_gf, nl = build_source(cfg, spectrum, grid)
    if nl is not None:
        raise ParameterError(
            "this diagnostic runs on problems with a state-independent source"
        )
    if F_gf is None and pin_source_grid:
        # a zero source pins the problem's own grid to the config grid
        F_gf = GridFunction.zeros(grid, spectrum.count, spectrum.label)
    phi = build_datum(cfg, spectrum, "phi")
    prob = LinearProblem(
        spectrum=spectrum, alpha=cfg.alpha, beta=cfg.beta, T=cfg.T,
        phi=phi, F=F_gf,
    )
    u = solve_backward_linear(prob, None if F_gf is not None else grid)
    return prob, u


def _require_q(cfg: RunConfig) -> float:
    if cfg.exponents is None or cfg.exponents.q is None:
        raise ParameterError("this diagnostic needs an exponents block with q")
    return cfg.exponents.q


def _verify_blowup(cfg: RunConfig, out_dir: Path):
    spectrum = build_spectrum(cfg)
    grid = build_grid(cfg)
    _, u = _linear_backward(cfg, spectrum, grid)
    q = _require_q(cfg)
    target = cfg.alpha * q
    gamma = _opt_float(cfg, "norm_gamma", 0.0)
    tol = _opt_float(cfg, "tolerance", 0.05)
    window = cfg.options.get("window")
    if window is not None:
        if (not isinstance(window, list) or len(window) != 2):
            raise ParameterError("run.window must be an array [t_lo, t_hi]")
        window = (float(window[0]), float(window[1]))
    fit = fit_blowup_exponent(u, spectrum, gamma, window=window)
    passed = abs(fit.exponent_hat - target) <= tol
    message = "" if passed else (
        f"fitted blow-up exponent {fit.exponent_hat:.4f} misses the "
        f"target alpha*q = {target:.4f} by more than {tol:g}"
    )
    t = grid.nodes[1:]
    norms = _node_norms(u.coeffs[1:], spectrum, gamma)
    _write(out_dir / "blowup.csv", _series_csv("t", "norm", t, norms))
    _write(out_dir / "plotdata" / "blowup_norm.csv",
           _series_csv("t", "norm", t, norms))
    _write(out_dir / "plotdata" / "blowup_compensated.csv",
           _series_csv("t", "norm_t_pow", t, norms * t**fit.exponent_hat))
    details = {
        "exponent_hat": fit.exponent_hat,
        "stderr": fit.stderr,
        "target": target,
        "window": list(fit.window),
        "norm": fit.norm_tag,
        "n_points": fit.n_points,
    }
    return passed, message, tol, details


def _verify_holder(cfg: RunConfig, out_dir: Path):
    spectrum = build_spectrum(cfg)
    grid = build_grid(cfg)
    _, u = _linear_backward(cfg, spectrum, grid)
    q = _require_q(cfg)
    s = _opt_float(cfg, "s", cfg.alpha * q)
    gamma = _opt_float(cfg, "norm_gamma", 0.0)
    rep = fit_holder_modulus(u, spectrum, gamma, s, include_origin=False)
    passed = math.isfinite(rep.sup_modulus)
    message = "" if passed else (
        f"Holder-{s:g} modulus is not finite away from t = 0"
    )
    t = grid.nodes
    base = t[1]
    gaps = t[2:] - base
    incr = _node_norms(u.coeffs[2:] - u.coeffs[1], spectrum, gamma)
    _write(out_dir / "holder.csv",
           _series_csv("gap", "modulus", gaps, incr / gaps**s))
    _write(out_dir / "plotdata" / "holder_increments.csv",
           _series_csv("t", "modulus", t[2:], incr / gaps**s))
    details = {
        "sup_modulus": rep.sup_modulus,
        "holder_order": s,
        "fitted_order": rep.fit.exponent_hat,
        "n_pairs": rep.n_pairs,
        "argmax_pair": list(rep.argmax_pair),
    }
    return passed, message, None, details


def _verify_caputo(cfg: RunConfig, out_dir: Path):
    spectrum = build_spectrum(cfg)
    grid = build_grid(cfg)
    prob, u = _linear_backward(cfg, spectrum, grid, pin_source_grid=True)
    tol = _opt_float(cfg, "tolerance", 1e-9)
    deriv = spectral_caputo(u, prob)
    F_mat = prob.F.coeffs
    residual = deriv.coeffs - (F_mat - prob.rates * u.coeffs)
    per_node = np.max(np.abs(residual), axis=1)
    worst = float(np.max(per_node))
    passed = worst <= tol
    message = "" if passed else (
        f"spectral Caputo residual {worst:.3e} exceeds {tol:g}: the modal "
        "equation D u = F - m u is violated"
    )
    _write(out_dir / "caputo.csv",
           _series_csv("t", "residual_linf", grid.nodes, per_node))
    _write(out_dir / "plotdata" / "caputo_residual.csv",
           _series_csv("t", "residual_linf", grid.nodes, per_node))
    details = {"max_residual": worst, "n_modes": spectrum.count}
    return passed, message, tol, details


def _verify_decomposition(cfg: RunConfig, out_dir: Path):
    spectrum = build_spectrum(cfg)
    grid = build_grid(cfg)
    prob, u = _linear_backward(cfg, spectrum, grid, pin_source_grid=True)
    tol = _opt_float(cfg, "tolerance", 1e-8)
    n_pairs = _opt_int(cfg, "n_pairs", 20)
    if n_pairs < 1:
        raise ParameterError(f"run.n_pairs must be >= 1, got {n_pairs}")
    K = grid.n_steps
    rng = np.random.default_rng(cfg.seed)
    rows = []
    worst = 0.0
    for _ in range(n_pairs):
        i1 = int(rng.integers(0, K))
        i2 = int(rng.integers(i1 + 1, K + 1))
        parts = increment_decomposition(prob, i1, i2)
        total = sum(p.coeffs for p in parts)
        delta = u.coeffs[i2] - u.coeffs[i1]
        err = float(np.max(np.abs(total - delta)))
        worst = max(worst, err)
        rows.append((i1, i2, grid.nodes[i1], grid.nodes[i2], err))
    # the history integral must vanish identically when the window
    # starts at t = 0
    history = increment_decomposition(prob, 0, K // 2)[0]
    history_zero = bool(np.all(history.coeffs == 0.0))
    passed = worst <= tol and history_zero
    if not history_zero:
        message = "history term is nonzero for a window starting at t = 0"
    elif worst > tol:
        message = (
            f"decomposition mismatch {worst:.3e} exceeds {tol:g}: the four "
            "terms do not reassemble the solver increment"
        )
    else:
        message = ""
    lines = ["i1,i2,t1,t2,error"]
    for i1, i2, t1, t2, err in rows:
        lines.append(f"{i1},{i2},{_fmt(t1)},{_fmt(t2)},{_fmt(err)}")
    _write(out_dir / "decomposition.csv", "\n".join(lines) + "\n")
    _write(out_dir / "plotdata" / "decomposition_error.csv",
           _series_csv("t2", "error", [r[3] for r in rows], [r[4] for r in rows]))
    details = {
        "max_error": worst,
        "n_pairs": n_pairs,
        "history_zero_at_origin": history_zero,
    }
    return passed, message, tol, details


def _verify_roundtrip(cfg: RunConfig, out_dir: Path):
    spectrum = build_spectrum(cfg)
    grid = build_grid(cfg)
    F_gf, nl = build_source(cfg, spectrum, grid)
    if nl is not None:
        raise ParameterError(
            "this diagnostic runs on problems with a state-independent source"
        )
    u0 = build_datum(cfg, spectrum, "u0")
    multiple = _opt_int(cfg, "reference_multiple", 1)
    default_tol = 1e-9 if F_gf is None else 1e-6
    tol = _opt_float(cfg, "tolerance", default_tol)
    F_fine = None
    if (multiple > 1 and F_gf is not None
            and "expression" in cfg.source_spec):
        # an expression source can be re-sampled on the reference grid,
        # exposing the true sampling error instead of rounding noise
        fine = TimeGrid.uniform(cfg.T, grid.n_steps * multiple)
        F_fine = GridFunction(
            fine,
            _eval_expression(cfg.source_spec["expression"], fine,
                             spectrum.count),
            spectrum.label, flags={"kind": "source"},
        )
    rep = roundtrip_experiment(
        spectrum, cfg.alpha, cfg.beta, cfg.T, u0, F=F_gf, grid=grid,
        reference_multiple=multiple, F_fine=F_fine,
    )
    passed = rep.max_deviation <= tol
    message = "" if passed else (
        f"round-trip deviation {rep.max_deviation:.3e} exceeds {tol:g}"
    )
    # per-node deviation series for plotting, same construction as the report
    fwd = solve_forward_linear(
        spectrum, cfg.alpha, cfg.beta, cfg.T, u0, F=F_gf, grid=grid
    )
    back_prob = LinearProblem(
        spectrum=spectrum, alpha=cfg.alpha, beta=cfg.beta, T=cfg.T,
        phi=ModalVector(fwd.coeffs[-1].copy(), spectrum.label), F=F_gf,
    )
    back = solve_backward_linear(back_prob, None if F_gf is not None else grid)
    dev = np.max(np.abs(back.coeffs - fwd.coeffs), axis=1)
    _write(out_dir / "roundtrip.csv",
           _series_csv("t", "deviation", grid.nodes, dev))
    _write(out_dir / "plotdata" / "roundtrip_deviation.csv",
           _series_csv("t", "deviation", grid.nodes, dev))
    details = {
        "max_deviation": rep.max_deviation,
        "node_norm_deviation": rep.node_norm_deviation,
        "terminal_gap": rep.terminal_gap,
        "max_amplification": rep.max_amplification,
        "n_modes": rep.n_modes,
        "reference_multiple": rep.reference_multiple,
        "reference_deviation": rep.reference_deviation,
    }
    return passed, message, tol, details


def _verify_unbounded(cfg: RunConfig, out_dir: Path):
    spectrum = build_spectrum(cfg)
    n_list = cfg.options.get("N_list")
    if n_list is None:
        n_list = [n for n in (16, 64, 256, 1024, 4096) if n <= spectrum.count]
        n_list = n_list or [spectrum.count]
    if not isinstance(n_list, list) or not n_list:
        raise ParameterError("run.N_list must be a non-empty array of integers")
    levels = sorted({int(n) for n in n_list if int(n) <= spectrum.count})
    if not levels:
        raise ParameterError(
            "every N_list entry exceeds the truncation; nothing to probe"
        )
    try:
        table = unboundedness_probe(
            spectrum, cfg.alpha, cfg.beta, cfg.T, levels
        )
    except CertificationError as exc:
        return False, str(exc), None, {"levels": levels}
    rows = list(table.rows())
    lines = ["N,S_N,lower_bound,safe_lower_bound,forward_S_N,H_N"]
    for r in rows:
        lines.append(
            f"{r['N']},{_fmt(r['S_N'])},{_fmt(r['lower_bound'])},"
            f"{_fmt(r['safe_lower_bound'])},{_fmt(r['forward_S_N'])},"
            f"{_fmt(r['H_N'])}"
        )
    _write(out_dir / "unbounded.csv", "\n".join(lines) + "\n")
    _write(out_dir / "plotdata" / "unbounded_sums.csv",
           _series_csv("N", "S_N", [r["N"] for r in rows],
                       [r["S_N"] for r in rows]))
    _write(out_dir / "plotdata" / "unbounded_bounds.csv",
           _series_csv("N", "lower_bound", [r["N"] for r in rows],
                       [r["lower_bound"] for r in rows]))
    details = {
        "levels": levels,
        "c_lo": table.c_lo,
        "c_hi": table.c_hi,
        "final_S_N": rows[-1]["S_N"],
        "final_lower_bound": rows[-1]["lower_bound"],
    }
    return True, "", None, details


def _verify_exponents(cfg: RunConfig, out_dir: Path):
    if cfg.exponents is None:
        raise ParameterError("verify exponents needs an exponents block")
    exps = cfg.exponents
    issues = validate_exponents(exps)
    n_samples = _opt_int(cfg, "samples", 200)
    sample_failures = 0
    samples_checked = 0
    perturbations_total = 0
    perturbations_rejected = 0
    if 0.0 < cfg.alpha < 1.0:
        rng = np.random.default_rng(cfg.seed)
        for _ in range(n_samples):
            cand = sample_exponents(cfg.alpha, exps.regime, rng)
            samples_checked += 1
            if validate_exponents(cand):
                sample_failures += 1
        for _label, bad in boundary_perturbations(exps):
            perturbations_total += 1
            if validate_exponents(bad):
                perturbations_rejected += 1
    passed = (not issues and sample_failures == 0
              and perturbations_rejected == perturbations_total)
    if issues:
        message = "exponent constraint violated: " + issues[0]
    elif sample_failures:
        message = (
            f"{sample_failures} of {samples_checked} sampled tuples from the "
            f"{exps.regime} generator failed validation"
        )
    elif perturbations_rejected != perturbations_total:
        message = (
            f"only {perturbations_rejected} of {perturbations_total} boundary "
            "perturbations were rejected"
        )
    else:
        message = ""
    lines = ["field,value"]
    for k, v in cfg.raw["exponents"].items():
        lines.append(f"{k},{v}")
    _write(out_dir / "exponents.csv", "\n".join(lines) + "\n")
    details = {
        "issues": issues,
        "regime": exps.regime,
        "samples_checked": samples_checked,
        "sample_failures": sample_failures,
        "perturbations_total": perturbations_total,
        "perturbations_rejected": perturbations_rejected,
    }
    return passed, message, None, details


_DIAGNOSTICS = {
    "blowup": _verify_blowup,
    "holder": _verify_holder,
    "caputo": _verify_caputo,
    "decomposition": _verify_decomposition,
    "roundtrip": _verify_roundtrip,
    "unbounded": _verify_unbounded,
    "exponents": _verify_exponents,
}


def cmd_verify(cfg: RunConfig, which: str, out_dir: Path) -> int:
    """Run one named diagnostic; exit 5 when it fails its tolerance."""
    try:
        runner = _DIAGNOSTICS[which]
    except KeyError:
        raise ParameterError(
            f"unknown diagnostic {which!r}; choose from "
            + ", ".join(sorted(_DIAGNOSTICS))
        ) from None
    passed, message, tolerance, details = runner(cfg, out_dir)
    report = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "command": "verify",
        "diagnostic": which,
        "pass": passed,
        "tolerance": tolerance,
        "message": message,
        "details": details,
        "config": cfg.raw,
    }
    _write(out_dir / "report.json", _json_text(report))
    if not passed:
        print(f"verify {which}: FAIL - {message}", file=sys.stderr)
        return 5
    print(f"verify {which}: pass")
    return 0


# ---------------------------------------------------------------------------
# spectrum


def cmd_spectrum(cfg: RunConfig, out_dir: Path) -> int:
    """Export the configured eigensystem as CSV plus a small meta file."""
    spectrum = build_spectrum(cfg)
    _write(out_dir / "spectrum.csv", spectrum_to_csv(spectrum))
    meta = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "command": "spectrum",
        "config": cfg.raw,
        "n_modes": spectrum.count,
        "first_eigenvalue": float(spectrum.eigenvalues[0]),
        "last_eigenvalue": float(spectrum.eigenvalues[-1]),
        "source": spectrum.source,
        "label": spectrum.label,
        "has_eigenvectors": spectrum.eigenvectors is not None,
    }
    _write(out_dir / "meta.json", _json_text(meta))
    j = np.arange(1, spectrum.count + 1)
    _write(out_dir / "plotdata" / "eigenvalues.csv",
           _series_csv("j", "eigenvalue", j, spectrum.eigenvalues))
    print(f"spectrum: wrote {out_dir / 'spectrum.csv'} "
          f"({spectrum.count} modes, {spectrum.source})")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backfrac",
        description="Backward-diffusion solvers and diagnostics "
                    "(terminal-value problems with fractional memory).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_mlf = sub.add_parser("mlf", help="tabulate Mittag-Leffler values")
    p_mlf.add_argument("--a", type=float, required=True, help="first order a > 0")
    p_mlf.add_argument("--b", type=float, required=True, help="second order b")
    p_mlf.add_argument("--z", type=float, nargs="+", required=True,
                       help="one or more evaluation points")

    def add_common(p):
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--out", default=None,
                       help="output directory (default: run.output_dir)")
        p.add_argument("--threads", type=int, default=None,
                       help="reserved; recorded in metadata only")

    p_solve = sub.add_parser("solve", help="run the configured solve")
    add_common(p_solve)
    p_solve.add_argument("--override-gate", action="store_true",
                         help="iterate even when the contraction gate fails")

    p_verify = sub.add_parser("verify", help="run one diagnostic")
    p_verify.add_argument("which", choices=sorted(_DIAGNOSTICS),
                          help="diagnostic to run")
    add_common(p_verify)

    p_spec = sub.add_parser("spectrum", help="export the eigensystem")
    p_spec.add_argument("--config", required=True)
    p_spec.add_argument("--out", default=None)
    return parser


def _fail(exc) -> None:
    print(f"backfrac: {exc}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "mlf":
            return cmd_mlf(args.a, args.b, args.z)
        cfg = load_config(args.config)
        out_dir = Path(args.out) if args.out else Path(cfg.output_dir)
        if args.command == "solve":
            return cmd_solve(cfg, out_dir, override_flag=args.override_gate,
                             threads=args.threads)
        if args.command == "verify":
            return cmd_verify(cfg, args.which, out_dir)
        return cmd_spectrum(cfg, out_dir)
    except GateRefusedError as exc:
        _fail(exc)
        return 3
    except DivergenceError as exc:
        _fail(exc)
        return 4
    except CertificationError as exc:
        _fail(exc)
        return 5
    except BackfracError as exc:
        _fail(exc)
        return 2
    except (OSError, ValueError) as exc:
        _fail(exc)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
