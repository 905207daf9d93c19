"""Gated fixed-point solver for backward problems with a semilinear source.

The linear machinery in operators.py handles a known forcing term.  Here
the forcing depends on the unknown, F = F(t, u), and the solution is the
limit of

    w_0 = phi (constant in time),
    w_n = O1[F(w_{n-1})] + O2[phi] + O3[F(w_{n-1})],

which contracts whenever the constant k0, assembled from the Lipschitz
bound of F, the horizon, the first eigenvalue and the certified
Mittag-Leffler envelope, stays below one.  The solver evaluates that gate
before iterating and refuses to run past it unless explicitly overridden;
every run reports per-iteration distances, the worst consecutive-distance
ratio, and a membership check of each iterate against the weighted
envelope C_hat0 * t^{-alpha q}.

Nonlinearities declare their own Lipschitz constant.  The declaration is
trusted by the gate but can be audited with `lipschitz_probe`, which
samples random state pairs and compares measured difference quotients
against the declared constant.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    CertificationError,
    GateRefusedError,
    DivergenceError,
    MeshMismatchError,
    ParameterError,
)
from .modal import TimeGrid
from .operators import GridFunction, LinearProblem, _check_denominators, _convolve_all
from .special import MLBoundConstants, beta, certify_ml_bounds, mlf_grid
from .spectral import Spectrum, project, synthesize, v_norm
from .verify import ExponentSet, validate_exponents

__all__ = [
    "Nonlinearity",
    "zero_source",
    "linear_source",
    "sine_source",
    "BUILTIN_SOURCES",
    "builtin_nonlinearity",
    "lipschitz_probe",
    "ContractionConstants",
    "contraction_constants",
    "PicardReport",
    "picard_solve",
    "verify_w_membership",
    "source_along",
    "report_to_json",
    "report_to_csv",
]


# ---------------------------------------------------------------------------
# nonlinear source terms


@dataclass(frozen=True)
class Nonlinearity:
    """A state-dependent source F(t, u) with a declared Lipschitz constant.

    `eval` maps (t, state) to source values and must be pure.  `space`
    selects the representation handed to it: "modal" passes the modal
    coefficient vector and expects coefficients back; "physical" passes
    nodal samples of u (the spectrum must then carry eigenvectors so the
    solver can synthesize and re-project around each call).

    The contraction theory assumes F(t, 0) = 0, so `zero_at_zero` must be
    True; the field exists to make that assumption visible, not optional.
    `time_lipschitz` is an optional declared constant for the t-variation
    of F and is carried as metadata only.
    """

    eval: Callable[[float, np.ndarray], np.ndarray]
    lipschitz_K: float
    space: str = "physical"
    time_lipschitz: float | None = None
    zero_at_zero: bool = True
    name: str = ""

    def __post_init__(self):
        if not callable(self.eval):
            raise ParameterError("Nonlinearity.eval must be callable")
        if not (math.isfinite(self.lipschitz_K) and self.lipschitz_K >= 0.0):
            raise ParameterError(
                f"lipschitz_K must be finite and >= 0, got {self.lipschitz_K}"
            )
        if self.space not in ("modal", "physical"):
            raise ParameterError(
                f"space must be 'modal' or 'physical', got {self.space!r}"
            )
        if self.zero_at_zero is not True:
            raise ParameterError(
                "the contraction theory requires F(t, 0) = 0; "
                "zero_at_zero must be True"
            )
        if self.time_lipschitz is not None and not (
            math.isfinite(self.time_lipschitz) and self.time_lipschitz >= 0.0
        ):
            raise ParameterError(
                f"time_lipschitz must be finite and >= 0, got {self.time_lipschitz}"
            )


def zero_source() -> Nonlinearity:
    """F identically zero; the iteration collapses onto the linear solver."""
    return Nonlinearity(
        eval=lambda t, state: np.zeros_like(state),
        lipschitz_K=0.0,
        space="modal",
        name="zero",
    )


def linear_source(factor: float) -> Nonlinearity:
    """F(t, u) = factor * u, acting mode by mode."""
    factor = float(factor)
    if not math.isfinite(factor):
        raise ParameterError(f"factor must be finite, got {factor}")
    return Nonlinearity(
        eval=lambda t, state: factor * state,
        lipschitz_K=abs(factor),
        space="modal",
        name=f"linear[{factor:g}]",
    )


def sine_source(scale: float) -> Nonlinearity:
    """F(t, u)(x) = scale * sin(u(x)), evaluated pointwise in space."""
    scale = float(scale)
    if not math.isfinite(scale):
        raise ParameterError(f"scale must be finite, got {scale}")
    return Nonlinearity(
        eval=lambda t, state: scale * np.sin(state),
        lipschitz_K=abs(scale),
        space="physical",
        name=f"sine[{scale:g}]",
    )


BUILTIN_SOURCES: dict[str, Callable[..., Nonlinearity]] = {
    "zero": zero_source,
    "linear_lambda": linear_source,
    "scaled_sine": sine_source,
}


def builtin_nonlinearity(kind: str, **params) -> Nonlinearity:
    """Build one of the named builtin sources with its parameters."""
    try:
        factory = BUILTIN_SOURCES[kind]
    except KeyError:
        raise ParameterError(
            f"unknown builtin nonlinearity {kind!r}; choose from "
            + ", ".join(sorted(BUILTIN_SOURCES))
        ) from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ParameterError(f"bad parameters for builtin {kind!r}: {exc}") from None


def lipschitz_probe(
    nonlinearity: Nonlinearity,
    spectrum: Spectrum,
    horizon: float = 1.0,
    n_pairs: int = 64,
    slack: float = 0.01,
    amplitude: float = 1.0,
    rng: np.random.Generator | None = None,
) -> float:
    """Audit the declared Lipschitz constant on random state pairs.

    Draws `n_pairs` pairs of random states (iid normal coefficients scaled
    by `amplitude`) at random times in [0, horizon] and measures
    ||F(t, v1) - F(t, v2)|| / ||v1 - v2|| in the L2 norm of the
    nonlinearity's own space.  Returns the worst ratio; raises
    CertificationError if it exceeds the declared constant by more than
    the slack fraction.
    """
    if horizon <= 0.0:
        raise ParameterError(f"horizon must be > 0, got {horizon}")
    if n_pairs < 1:
        raise ParameterError(f"n_pairs must be >= 1, got {n_pairs}")
    if rng is None:
        rng = np.random.default_rng(0)
    physical = nonlinearity.space == "physical"
    if physical:
        spectrum.require_vectors()
        qw = spectrum.quad_weights
    n = spectrum.count
    worst = 0.0
    for _ in range(n_pairs):
        tk = float(rng.uniform(0.0, horizon))
        v1 = amplitude * rng.standard_normal(n)
        v2 = amplitude * rng.standard_normal(n)
        if physical:
            s1 = synthesize(spectrum, v1)
            s2 = synthesize(spectrum, v2)
            f1 = np.asarray(nonlinearity.eval(tk, s1), dtype=float)
            f2 = np.asarray(nonlinearity.eval(tk, s2), dtype=float)
            num = math.sqrt(float(np.sum(qw * (f1 - f2) ** 2)))
            den = math.sqrt(float(np.sum(qw * (s1 - s2) ** 2)))
        else:
            f1 = np.asarray(nonlinearity.eval(tk, v1), dtype=float)
            f2 = np.asarray(nonlinearity.eval(tk, v2), dtype=float)
            num = float(np.linalg.norm(f1 - f2))
            den = float(np.linalg.norm(v1 - v2))
        if den == 0.0:
            continue
        worst = max(worst, num / den)
    if worst > nonlinearity.lipschitz_K * (1.0 + slack):
        raise CertificationError(
            f"empirical Lipschitz ratio {worst:.6g} exceeds the declared "
            f"constant {nonlinearity.lipschitz_K:g} (+{slack:.0%} slack) "
            f"over {n_pairs} random pairs"
        )
    return worst


# ---------------------------------------------------------------------------
# contraction constants and the gate


@dataclass(frozen=True)
class ContractionConstants:
    """Constants certifying (or refusing) the fixed-point iteration.

    k0 is the contraction factor of the iteration map; k0 < 1 passes the
    gate.  M0 bounds the weighted size of the first iterate, C_tilde0 =
    M0 / (1 - k0) propagates that bound through the geometric series, and
    C_hat0 = C_tilde0 * ||phi||_{V_{beta p}} is the envelope constant for
    the membership check ||w_n(t)|| <= C_hat0 t^{-alpha q}.  When k0 >= 1
    the last two are infinite.  inputs_echo records every quantity the
    formulas consumed.
    """

    k0: float
    M0: float
    C_tilde0: float
    C_hat0: float
    inputs_echo: dict = field(default_factory=dict)


def contraction_constants(
    prob: LinearProblem,
    lipschitz_K: float,
    exps: ExponentSet,
    bounds: MLBoundConstants | None = None,
) -> ContractionConstants:
    """Assemble the gate constants for a problem and a Lipschitz bound.

    Requires the conjugate exponent pair (p, q) with p + q = 1; the other
    exponent fields play no role here.  `bounds` must certify the decay
    envelope for the problem's own alpha (and is computed on the spot
    when omitted).  With m1 the first eigenvalue of the spatial operator
    and B the Euler Beta function,

        k0 = K B(aq, 1-aq) T^{aq} [c_hi m1^{-beta p}
                                   + c_hi^2 c_lo^{-1} (m1^{-beta} + T^alpha)^p],
        M0 = m1^{-beta p} T^{aq} + c_hi c_lo^{-1} T^{aq} (m1^{-beta} + T^alpha)^p,

    where aq = alpha q and m1^{-beta p} is the embedding constant C_D of
    V_{beta p} into L2 on the truncated spectrum.
    """
    K = float(lipschitz_K)
    if not (math.isfinite(K) and K >= 0.0):
        raise ParameterError(
            f"Lipschitz constant must be finite and >= 0, got {lipschitz_K}"
        )
    if exps.p is None or exps.q is None:
        raise ParameterError(
            "contraction constants need the conjugate exponent pair (p, q)"
        )
    p, q = float(exps.p), float(exps.q)
    if not (0.0 < p < 1.0 and 0.0 < q < 1.0) or abs(p + q - 1.0) > 1e-12:
        raise ParameterError(
            f"(p, q) must lie in (0, 1) with p + q = 1, got ({p}, {q})"
        )
    if abs(exps.alpha - prob.alpha) > 1e-12:
        raise ParameterError(
            f"exponent set carries alpha = {exps.alpha}, problem has {prob.alpha}"
        )
    if bounds is None:
        bounds = certify_ml_bounds(prob.alpha)
    if abs(bounds.alpha - prob.alpha) > 1e-12:
        raise ParameterError(
            f"bounds certify alpha = {bounds.alpha}, problem has {prob.alpha}"
        )
    alpha, T, beta_exp = prob.alpha, prob.T, prob.beta
    m1 = float(prob.spectrum.eigenvalues[0])
    aq = alpha * q
    B = beta(aq, 1.0 - aq)
    c_lo, c_hi = bounds.c_lo, bounds.c_hi
    C_D = m1 ** (-beta_exp * p)
    mix = (m1 ** (-beta_exp) + T**alpha) ** p
    k0 = K * B * T**aq * (c_hi * C_D + (c_hi**2 / c_lo) * mix)
    M0 = C_D * T**aq + (c_hi / c_lo) * T**aq * mix
    C_tilde0 = M0 / (1.0 - k0) if k0 < 1.0 else math.inf
    phi_norm = v_norm(prob.spectrum, beta_exp * p, prob.phi)
    if math.isinf(C_tilde0):
        C_hat0 = 0.0 if phi_norm == 0.0 else math.inf
    else:
        C_hat0 = C_tilde0 * phi_norm
    return ContractionConstants(
        k0=k0,
        M0=M0,
        C_tilde0=C_tilde0,
        C_hat0=C_hat0,
        inputs_echo={
            "alpha": alpha,
            "q": q,
            "p": p,
            "T": T,
            "K": K,
            "beta": beta_exp,
            "m1": m1,
            "c_lo": c_lo,
            "c_hi": c_hi,
            "C_D": C_D,
        },
    )


# ---------------------------------------------------------------------------
# the iteration


@dataclass
class PicardReport:
    """Everything a fixed-point run measured about itself.

    distances[n] is the sup over grid nodes t >= t_1 of the modal l2 gap
    between iterates n+1 and n; weighted_distances holds the same gaps in
    the grid L^{1/(alpha q) - r} norm when the exponent set supplies r.
    measured_ratio is the worst consecutive-distance ratio over pairs
    whose denominator clears the rounding floor of 10 * tol.
    w_membership has one (ok, ratio) entry per iterate, including the
    initial one, from `verify_w_membership`.
    """

    iterations: int
    converged: bool
    tol: float
    k0: float
    gate_passed: bool
    override_used: bool
    measured_ratio: float
    distances: list[float]
    weighted_distances: list[float]
    constants: ContractionConstants
    w_membership: list[tuple[bool, float]]
    weighted_exponent: float | None = None


def _source_matrix(
    nonlinearity: Nonlinearity,
    spectrum: Spectrum,
    times: np.ndarray,
    w_mat: np.ndarray,
) -> np.ndarray:
    """Evaluate F(t_k, w(t_k)) at every node, returned as modal columns."""
    if nonlinearity.space == "modal":
        out = np.empty_like(w_mat)
        for k, tk in enumerate(times):
            row = np.asarray(nonlinearity.eval(float(tk), w_mat[k]), dtype=float)
            if row.shape != w_mat[k].shape:
                raise ParameterError(
                    f"nonlinearity returned shape {row.shape} "
                    f"for state shape {w_mat[k].shape}"
                )
            out[k] = row
        return out
    samples = synthesize(spectrum, w_mat)
    out_s = np.empty_like(samples)
    for k, tk in enumerate(times):
        row = np.asarray(nonlinearity.eval(float(tk), samples[k]), dtype=float)
        if row.shape != samples[k].shape:
            raise ParameterError(
                f"nonlinearity returned shape {row.shape} "
                f"for sample shape {samples[k].shape}"
            )
        out_s[k] = row
    return project(spectrum, out_s).coeffs


def source_along(
    nonlinearity: Nonlinearity, spectrum: Spectrum, u: GridFunction
) -> GridFunction:
    """F(t_k, u(t_k)) along a trajectory, packaged as a source term.

    Feeding the result into the linear solver must reproduce a fixed
    point of the iteration; the gap between that re-solve and u is the
    residual of the returned solution.
    """
    mat = _source_matrix(nonlinearity, spectrum, u.grid.nodes, u.coeffs)
    return GridFunction(u.grid, mat, u.spectrum_ref, flags={"kind": "source"})


def _sup_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Largest per-node modal l2 gap over nodes t >= t_1."""
    diff = a[1:] - b[1:]
    return float(np.max(np.sqrt(np.sum(diff * diff, axis=1))))


def _weighted_lp(diff: np.ndarray, t: np.ndarray, p_exp: float) -> float:
    """Grid L^p norm (trapezoid in time) of the per-node l2 profile."""
    g = np.sqrt(np.sum(diff * diff, axis=1))
    return float(np.trapezoid(g**p_exp, t) ** (1.0 / p_exp))


def verify_w_membership(
    iterates: Sequence, C_hat0: float, alpha_q: float, grid: TimeGrid
) -> list[tuple[bool, float]]:
    """Check each iterate against the envelope C_hat0 * t^{-alpha q}.

    Returns one (ok, ratio) pair per iterate, where ratio is the largest
    t^{alpha q} ||w(t)|| / C_hat0 over nodes t > 0; ratio <= 1 means the
    iterate sits inside the envelope.  A zero envelope admits only
    identically-zero iterates; an infinite one admits everything.
    """
    t = np.asarray(grid.nodes, dtype=float)
    mask = t > 0.0
    weight = t[mask] ** float(alpha_q)
    out: list[tuple[bool, float]] = []
    for w in iterates:
        mat = np.asarray(getattr(w, "coeffs", w), dtype=float)
        if mat.shape[0] != t.size:
            raise MeshMismatchError(
                f"iterate has {mat.shape[0]} rows for {t.size} grid nodes"
            )
        norms = np.sqrt(np.sum(mat[mask] ** 2, axis=1))
        peak = float(np.max(weight * norms)) if norms.size else 0.0
        if C_hat0 == 0.0:
            ratio = 0.0 if peak == 0.0 else math.inf
        else:
            ratio = peak / C_hat0
        out.append((bool(ratio <= 1.0 + 1e-12), float(ratio)))
    return out


def picard_solve(
    prob: LinearProblem,
    nonlinearity: Nonlinearity,
    exps: ExponentSet,
    *,
    grid: TimeGrid | None = None,
    max_iter: int = 100,
    tol: float = 1e-10,
    override_gate: bool = False,
    initial: GridFunction | None = None,
    bounds: MLBoundConstants | None = None,
) -> tuple[GridFunction, PicardReport]:
    """Solve the semilinear backward problem by gated fixed-point iteration.

    The problem must carry F = None; the source comes from the
    nonlinearity.  The gate k0 < 1 is evaluated first and a failing gate
    raises GateRefusedError unless override_gate is set (the override is
    recorded in the report; the gate is sufficient for contraction, not
    necessary, so overridden runs may still converge).  Iteration stops
    when the sup-grid distance between consecutive iterates drops below
    tol or after max_iter steps; five consecutive distance increases
    abort with DivergenceError.  The default initial iterate is the
    terminal datum held constant in time.

    Returns the final iterate as a GridFunction together with a
    PicardReport of distances, ratios, gate data and envelope membership.
    """
    if prob.F is not None:
        raise ParameterError(
            "the nonlinear solver derives its source from the state; "
            "build the problem with F = None"
        )
    issues = validate_exponents(exps)
    if issues:
        raise ParameterError("invalid exponent set: " + "; ".join(issues))
    if max_iter < 1:
        raise ParameterError(f"max_iter must be >= 1, got {max_iter}")
    if not (tol > 0.0):
        raise ParameterError(f"tol must be > 0, got {tol}")
    constants = contraction_constants(prob, nonlinearity.lipschitz_K, exps, bounds)
    gate_passed = constants.k0 < 1.0
    if not gate_passed and not override_gate:
        raise GateRefusedError(constants.k0)
    override_used = override_gate and not gate_passed

    grid = prob.grid_or(grid)
    t = grid.nodes
    alpha = prob.alpha
    rates = prob.rates
    decay = mlf_grid(alpha, 1.0, -np.outer(t**alpha, rates))
    denom = decay[-1]
    _check_denominators(prob, denom)
    phi = prob.phi.coeffs

    if initial is None:
        state = np.tile(phi, (t.size, 1))
    else:
        if not np.array_equal(initial.grid.nodes, t):
            raise MeshMismatchError("initial iterate lives on a different time grid")
        if initial.coeffs.shape[1] != phi.size:
            raise MeshMismatchError(
                f"initial iterate has {initial.coeffs.shape[1]} modes, "
                f"problem has {phi.size}"
            )
        state = initial.coeffs.astype(float, copy=True)

    aq = alpha * exps.q
    p_exp = (1.0 / aq - exps.r) if exps.r is not None else None

    def step(w_mat: np.ndarray) -> np.ndarray:
        F_mat = _source_matrix(nonlinearity, prob.spectrum, t, w_mat)
        if np.any(F_mat):
            conv = _convolve_all(F_mat, alpha, rates, grid)
        else:
            conv = np.zeros_like(w_mat)
        return conv + decay * ((phi - conv[-1]) / denom)

    iterates = [state]
    distances: list[float] = []
    weighted: list[float] = []
    rising = 0
    converged = False
    for _ in range(max_iter):
        nxt = step(state)
        d = _sup_distance(nxt, state)
        distances.append(d)
        if p_exp is not None:
            weighted.append(_weighted_lp(nxt - state, t, p_exp))
        iterates.append(nxt)
        state = nxt
        if nonlinearity.lipschitz_K == 0.0:
            # K = 0 makes the source state-independent, so one application
            # of the affine map already lands on the fixed point
            converged = True
            break
        if d < tol:
            converged = True
            break
        if len(distances) >= 2 and d > distances[-2]:
            rising += 1
            if rising >= 5:
                raise DivergenceError(distances)
        else:
            rising = 0

    floor = 10.0 * tol
    ratios = [
        distances[i] / distances[i - 1]
        for i in range(1, len(distances))
        if distances[i - 1] > floor
    ]
    measured_ratio = max(ratios) if ratios else 0.0
    membership = verify_w_membership(iterates, constants.C_hat0, aq, grid)

    u = GridFunction(
        grid=grid,
        coeffs=state,
        spectrum_ref=prob.spectrum.label,
        flags={
            "direction": "backward",
            "nonlinear": True,
            "source": nonlinearity.name or "custom",
            "override_used": override_used,
            "t0_amplified": True,
            "max_amplification": float(np.max(1.0 / denom)),
        },
    )
    report = PicardReport(
        iterations=len(distances),
        converged=converged,
        tol=tol,
        k0=constants.k0,
        gate_passed=gate_passed,
        override_used=override_used,
        measured_ratio=measured_ratio,
        distances=distances,
        weighted_distances=weighted,
        constants=constants,
        w_membership=membership,
        weighted_exponent=p_exp,
    )
    return u, report


# ---------------------------------------------------------------------------
# report serialisation


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def report_to_json(report: PicardReport) -> str:
    """Serialise a PicardReport as stable, strictly valid JSON.

    Non-finite constants (an overridden gate makes C_tilde0 infinite) are
    written as their repr strings so the output stays parseable.
    """
    c = report.constants
    payload = {
        "iterations": report.iterations,
        "converged": report.converged,
        "tol": report.tol,
        "distances": report.distances,
        "weighted_distances": report.weighted_distances,
        "weighted_exponent": report.weighted_exponent,
        "measured_ratio": _jsonable(report.measured_ratio),
        "gate": {
            "k0": _jsonable(report.k0),
            "passed": report.gate_passed,
            "override_used": report.override_used,
        },
        "constants": {
            "k0": _jsonable(c.k0),
            "M0": _jsonable(c.M0),
            "C_tilde0": _jsonable(c.C_tilde0),
            "C_hat0": _jsonable(c.C_hat0),
            "inputs": {k: _jsonable(v) for k, v in c.inputs_echo.items()},
        },
        "w_membership": [
            {"iterate": i, "ok": ok, "ratio": _jsonable(ratio)}
            for i, (ok, ratio) in enumerate(report.w_membership)
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def report_to_csv(report: PicardReport) -> str:
    """One row per iterate: distances from the previous iterate, the
    consecutive-distance ratio, and the envelope membership data."""
    lines = ["iterate,distance,weighted_distance,ratio,member,membership_ratio"]
    for i, (ok, m_ratio) in enumerate(report.w_membership):
        d = f"{report.distances[i - 1]:.17g}" if i >= 1 else ""
        wd = (
            f"{report.weighted_distances[i - 1]:.17g}"
            if i >= 1 and i - 1 < len(report.weighted_distances)
            else ""
        )
        r = ""
        if i >= 2 and report.distances[i - 2] > 0.0:
            r = f"{report.distances[i - 1] / report.distances[i - 2]:.17g}"
        lines.append(
            f"{i},{d},{wd},{r},{str(ok).lower()},{m_ratio:.17g}"
        )
    return "\n".join(lines) + "\n"
