"""Diagnostics that turn the solver's qualitative theory into measured numbers.

Four groups of tools live here.  Exponent bookkeeping: the admissible-range
validator, per-regime samplers and boundary fuzzers for the interpolation
exponents that parameterise every estimate downstream.  Rate fitting:
least-squares log-log fits of the t -> 0 norm blow-up and of the Hölder
modulus of backward trajectories.  Increment analysis: the four-term
decomposition of u(t2) - u(t1), each term integrated by its own quadrature so
that their sum reproducing the solver's increment is a genuine cross-check,
plus the spectral form of the fractional time derivative.  Experiment
drivers: the forward/backward round trip and the edge-regularity terminal
datum used to exhibit sharp blow-up rates.

All computations are read-only over GridFunction/ModalVector inputs and are
deterministic for identical inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateFitError,
    MeshMismatchError,
    NonUniformGridError,
    ParameterError,
    ResolutionError,
)
from .modal import TimeGrid
from .operators import (
    GridFunction,
    LinearProblem,
    _check_denominators,
    _conv_matrix,
    _decay_tables,
    solve_backward_linear,
    solve_forward_linear,
)
from .special import kernel_antiderivative, mlf_grid
from .spectral import ModalVector, Spectrum

__all__ = [
    "ExponentSet",
    "REGIMES",
    "validate_exponents",
    "sample_exponents",
    "boundary_perturbations",
    "RateFit",
    "fit_blowup_exponent",
    "HolderReport",
    "fit_holder_modulus",
    "increment_decomposition",
    "spectral_caputo",
    "RoundtripReport",
    "roundtrip_experiment",
    "edge_regularity_datum",
]


# ---------------------------------------------------------------------------
# exponent regimes

REGIMES = ("R_linear", "R_nonlinear_a", "R_nonlinear_b", "R_nonlinear_deriv")

# equalities (p + q = 1 and the primed/hatted complements) are checked to
# this tolerance; all inequalities are checked exactly as stated
_EQ_TOL = 1e-12


@dataclass(frozen=True)
class ExponentSet:
    """Interpolation exponents with their admissibility regime.

    Fields default to None (absent).  Absent fields are simply not
    checked; present fields are checked against every constraint of the
    regime that mentions them.  The regime tags select which rule book
    applies:

      R_linear          full linear theory (pairs p/q, r, s, primed,
                        hatted exponents all admissible together)
      R_nonlinear_a     fixed-point theory, p' < p variant
      R_nonlinear_b     fixed-point theory, q < p with p' <= p - q
      R_nonlinear_deriv as R_nonlinear_a plus the hatted derivative pair
    """

    alpha: float
    regime: str = "R_linear"
    p: float | None = None
    q: float | None = None
    r: float | None = None
    s: float | None = None
    p_prime: float | None = None
    q_prime: float | None = None
    p_hat: float | None = None
    q_hat: float | None = None
    r_hat: float | None = None

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ParameterError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.regime not in REGIMES:
            raise ParameterError(
                f"unknown regime {self.regime!r}; expected one of {REGIMES}"
            )


def validate_exponents(e: ExponentSet) -> list[str]:
    """Check every regime constraint touching a present field.

    Returns the list of violated constraints as human-readable strings
    (empty list = admissible).  Violations are data, not errors: callers
    decide whether to refuse.  Each message names the binding constraint
    together with the offending values.
    """
    v: list[str] = []
    a = e.alpha

    if (e.p is None) != (e.q is None):
        v.append("p and q must be supplied together")
    if e.p is not None and e.q is not None:
        if not (0.0 < e.p < 1.0):
            v.append(f"p must lie in (0, 1), got p = {e.p}")
        if not (0.0 < e.q < 1.0):
            v.append(f"q must lie in (0, 1), got q = {e.q}")
        if abs(e.p + e.q - 1.0) > _EQ_TOL:
            v.append(f"p + q must equal 1, got {e.p + e.q}")
        if e.regime == "R_nonlinear_b" and not (e.q < e.p):
            v.append(f"the regime needs q < p strictly, got p = {e.p}, q = {e.q}")

    if (e.p_prime is None) != (e.q_prime is None):
        v.append("p_prime and q_prime must be supplied together")
    if e.p_prime is not None and e.q_prime is not None:
        if abs(e.p_prime + e.q_prime - 1.0) > _EQ_TOL:
            v.append(
                f"q_prime must equal 1 - p_prime, got p' = {e.p_prime}, q' = {e.q_prime}"
            )
        if e.p is not None:
            if e.regime == "R_linear":
                if e.s is None:
                    v.append("p_prime needs s present (its ceiling is p - s/alpha)")
                else:
                    ceil = e.p - e.s / a
                    if not (0.0 < e.p_prime <= ceil):
                        v.append(
                            f"p_prime must lie in (0, p - s/alpha] = (0, {ceil}], "
                            f"got {e.p_prime}"
                        )
            elif e.regime == "R_nonlinear_b":
                ceil = e.p - e.q
                if not (0.0 < e.p_prime <= ceil):
                    v.append(
                        f"p_prime must lie in (0, p - q] = (0, {ceil}], got {e.p_prime}"
                    )
            else:
                if not (0.0 < e.p_prime < e.p):
                    v.append(
                        f"p_prime must lie in (0, p) = (0, {e.p}), got {e.p_prime}"
                    )

    if e.r is not None:
        # with a primed pair present the sharper ceiling through q' binds
        qq = e.q_prime if e.p_prime is not None else e.q
        if qq is None:
            v.append("r needs q (or the primed pair) present for its ceiling")
        elif not (0.0 < a * qq < 1.0):
            v.append(f"r's ceiling needs 0 < alpha*q < 1, got alpha*q = {a * qq}")
        else:
            ceil = (1.0 - a * qq) / (a * qq)
            if not (0.0 < e.r <= ceil):
                which = "q_prime" if e.p_prime is not None else "q"
                v.append(
                    f"r must lie in (0, (1 - alpha {which})/(alpha {which})] "
                    f"= (0, {ceil}], got {e.r}"
                )

    if e.s is not None:
        if e.regime != "R_linear":
            v.append(f"s is not an exponent of regime {e.regime}")
        elif e.q is None:
            v.append("s needs q present for its ceiling")
        else:
            ceil = min(a * e.q, 1.0 - a * e.q)
            if not (0.0 < e.s < ceil):
                v.append(
                    f"s must lie strictly inside (0, min(alpha q, 1 - alpha q)) "
                    f"= (0, {ceil}), got {e.s}"
                )

    if (e.q_hat is None) != (e.p_hat is None):
        v.append("q_hat and p_hat must be supplied together")
    if e.q_hat is not None and e.p_hat is not None:
        if abs(e.p_hat + e.q_hat - 1.0) > _EQ_TOL:
            v.append(
                f"p_hat must equal 1 - q_hat, got p^ = {e.p_hat}, q^ = {e.q_hat}"
            )
        if e.regime == "R_linear":
            if e.p is None or e.s is None:
                v.append("q_hat needs p, q and s present (ceiling min(p, q, s/alpha))")
            else:
                ceil = min(e.p, e.q, e.s / a)
                if not (0.0 <= e.q_hat <= ceil):
                    v.append(
                        f"q_hat must lie in [0, min(p, q, s/alpha)] = [0, {ceil}], "
                        f"got {e.q_hat}"
                    )
        elif e.regime == "R_nonlinear_deriv":
            if e.q is None:
                v.append("q_hat needs q present for its ceiling")
            elif not (0.0 <= e.q_hat < e.q):
                v.append(f"q_hat must lie in [0, q) = [0, {e.q}), got {e.q_hat}")
        else:
            v.append(f"q_hat is not an exponent of regime {e.regime}")

    if e.r_hat is not None:
        if e.regime not in ("R_linear", "R_nonlinear_deriv"):
            v.append(f"r_hat is not an exponent of regime {e.regime}")
        elif a >= 1.0:
            v.append("r_hat's range (0, (1 - alpha)/alpha] is empty at alpha = 1")
        else:
            ceil = (1.0 - a) / a
            if not (0.0 < e.r_hat <= ceil):
                v.append(
                    f"r_hat must lie in (0, (1 - alpha)/alpha] = (0, {ceil}], "
                    f"got {e.r_hat}"
                )

    return v


def sample_exponents(alpha: float, regime: str, rng=None) -> ExponentSet:
    """Draw an admissible exponent set strictly inside the regime's ranges.

    Inequality constraints are sampled with interior margin so that
    validate_exponents always returns []; equalities hold exactly.
    Needs alpha < 1 (two ceilings are empty ranges at alpha = 1).
    """
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0):
        raise ParameterError(
            f"samplers need alpha in (0, 1): the r_hat range is empty at alpha = 1, "
            f"got {alpha}"
        )
    if regime not in REGIMES:
        raise ParameterError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    rng = np.random.default_rng(0) if rng is None else rng

    if regime == "R_nonlinear_b":
        p = float(rng.uniform(0.55, 0.95))
    else:
        p = float(rng.uniform(0.05, 0.95))
    q = 1.0 - p
    fields = {"alpha": alpha, "regime": regime, "p": p, "q": q}

    if regime == "R_linear":
        # keeping s below alpha*p as well leaves room for the primed pair
        s_ceil = min(alpha * q, 1.0 - alpha * q, alpha * p)
        s = float(rng.uniform(0.1, 0.9)) * s_ceil
        pp = float(rng.uniform(0.1, 0.999)) * (p - s / alpha)
        q_hat = float(rng.uniform(0.0, 0.999)) * min(p, q, s / alpha)
        fields.update(s=s, q_hat=q_hat, p_hat=1.0 - q_hat)
    elif regime == "R_nonlinear_b":
        pp = float(rng.uniform(0.1, 0.999)) * (p - q)
    else:
        pp = float(rng.uniform(0.05, 0.995)) * p
        if regime == "R_nonlinear_deriv":
            q_hat = float(rng.uniform(0.0, 0.995)) * q
            fields.update(q_hat=q_hat, p_hat=1.0 - q_hat)

    qp = 1.0 - pp
    r = float(rng.uniform(0.05, 0.999)) * (1.0 - alpha * qp) / (alpha * qp)
    fields.update(p_prime=pp, q_prime=qp, r=r)

    if regime in ("R_linear", "R_nonlinear_deriv"):
        fields["r_hat"] = float(rng.uniform(0.05, 0.999)) * (1.0 - alpha) / alpha

    return ExponentSet(**fields)


def boundary_perturbations(
    e: ExponentSet, delta: float = 1e-6
) -> list[tuple[str, ExponentSet]]:
    """Push each binding constraint of a valid set just past its boundary.

    Returns (label, perturbed copy) pairs; every copy must be rejected by
    validate_exponents.  Linked equalities are kept consistent where the
    perturbation targets a range, so that (at least) the intended
    constraint fires.
    """
    out: list[tuple[str, ExponentSet]] = []
    a = e.alpha

    if e.p is not None and e.q is not None:
        out.append(("p + q = 1 broken", replace(e, q=e.q + delta)))
        out.append(("p above 1", replace(e, p=1.0 + delta, q=-delta)))
        out.append(("p at zero", replace(e, p=0.0, q=1.0)))
        if e.regime == "R_nonlinear_b":
            out.append(("q < p broken", replace(e, p=0.5, q=0.5)))

    if e.r is not None:
        qq = e.q_prime if e.p_prime is not None else e.q
        if qq is not None and 0.0 < a * qq < 1.0:
            ceil = (1.0 - a * qq) / (a * qq)
            out.append(("r above its ceiling", replace(e, r=ceil + delta)))
        out.append(("r nonpositive", replace(e, r=0.0)))

    if e.s is not None and e.q is not None:
        ceil = min(a * e.q, 1.0 - a * e.q)
        out.append(("s at its strict ceiling", replace(e, s=ceil)))
        out.append(("s nonpositive", replace(e, s=0.0)))

    if e.p_prime is not None and e.p is not None:
        if e.regime == "R_linear" and e.s is not None:
            bad = e.p - e.s / a + delta
            out.append(
                ("p_prime above its ceiling", replace(e, p_prime=bad, q_prime=1.0 - bad))
            )
        elif e.regime == "R_nonlinear_b" and e.q is not None:
            bad = e.p - e.q + delta
            out.append(
                ("p_prime above its ceiling", replace(e, p_prime=bad, q_prime=1.0 - bad))
            )
        else:
            out.append(
                ("p_prime at its strict ceiling", replace(e, p_prime=e.p, q_prime=1.0 - e.p))
            )
        out.append(("p_prime at zero", replace(e, p_prime=0.0, q_prime=1.0)))
        out.append(("q_prime decoupled", replace(e, q_prime=e.q_prime + delta)))

    if e.q_hat is not None:
        if e.regime == "R_linear" and e.p is not None and e.s is not None:
            ceil = min(e.p, e.q, e.s / a)
            bad = ceil + delta
            out.append(
                ("q_hat above its ceiling", replace(e, q_hat=bad, p_hat=1.0 - bad))
            )
        elif e.regime == "R_nonlinear_deriv" and e.q is not None:
            out.append(
                ("q_hat at its strict ceiling", replace(e, q_hat=e.q, p_hat=1.0 - e.q))
            )
        out.append(("q_hat negative", replace(e, q_hat=-delta, p_hat=1.0 + delta)))
        out.append(("p_hat decoupled", replace(e, p_hat=e.p_hat + delta)))

    if e.r_hat is not None and a < 1.0:
        ceil = (1.0 - a) / a
        out.append(("r_hat above its ceiling", replace(e, r_hat=ceil + delta)))
        out.append(("r_hat nonpositive", replace(e, r_hat=0.0)))

    return out


# ---------------------------------------------------------------------------
# rate fitting


@dataclass(frozen=True)
class RateFit:
    """Ordinary least-squares fit of log(norm) against log(time)."""

    exponent_hat: float
    stderr: float
    window: tuple[float, float]
    norm_tag: str
    n_points: int = 0


def _norm_tag(gamma: float) -> str:
    return "L2" if gamma == 0.0 else f"V[{gamma:g}]"


def _row_norms(coeffs: np.ndarray, spectrum: Spectrum, gamma: float) -> np.ndarray:
    w = spectrum.eigenvalues ** (2.0 * gamma) if gamma != 0.0 else 1.0
    return np.sqrt((coeffs * coeffs * w).sum(axis=-1))


def _ols_loglog(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Slope and its standard error for log y against log x."""
    lx = np.log(x)
    ly = np.log(y)
    xm = lx - lx.mean()
    sxx = float(np.dot(xm, xm))
    slope = float(np.dot(xm, ly)) / sxx
    resid = ly - ly.mean() - slope * xm
    dof = x.size - 2
    stderr = math.sqrt(float(np.dot(resid, resid)) / dof / sxx) if dof > 0 else 0.0
    return slope, stderr


def fit_blowup_exponent(
    u: GridFunction,
    spectrum: Spectrum,
    norm_gamma: float,
    window: tuple[float, float] | None = None,
) -> RateFit:
    """Measure the t -> 0 growth rate of ||u(t)|| on a log-log window.

    Fits log ||u(t)||_{V_gamma} = c - exponent_hat * log t by ordinary
    least squares over the grid nodes inside `window` (default
    [T/1000, T/10]).  A backward solution with terminal data at the edge
    of its regularity class grows like t^{-alpha*q}, so exponent_hat
    estimates alpha*q; smooth data fits approximately zero.

    The window must sit inside (0, T/2] and contain at least 8 nodes.
    """
    T = u.grid.horizon
    if window is None:
        window = (T / 1000.0, T / 10.0)
    lo, hi = float(window[0]), float(window[1])
    if not (0.0 < lo < hi <= T / 2.0 * (1.0 + 1e-12)):
        raise ParameterError(
            f"fit window must satisfy 0 < lo < hi <= T/2, got ({lo}, {hi}) with T = {T}"
        )
    t = u.grid.nodes
    mask = (t >= lo * (1.0 - 1e-12)) & (t <= hi * (1.0 + 1e-12)) & (t > 0.0)
    if int(mask.sum()) < 8:
        raise ResolutionError(
            f"only {int(mask.sum())} grid nodes fall inside the fit window "
            f"({lo:g}, {hi:g}); need at least 8"
        )
    norms = _row_norms(u.coeffs[mask], spectrum, norm_gamma)
    if not np.all(np.isfinite(norms)) or np.any(norms <= 1e-300):
        raise DegenerateFitError(
            "the trajectory norm vanishes (or is not finite) on the fit window"
        )
    slope, stderr = _ols_loglog(t[mask], norms)
    return RateFit(
        exponent_hat=-slope,
        stderr=stderr,
        window=(lo, hi),
        norm_tag=_norm_tag(norm_gamma),
        n_points=int(mask.sum()),
    )


@dataclass(frozen=True)
class HolderReport:
    """Sup-modulus over node pairs plus the fitted increment exponent."""

    sup_modulus: float
    fit: RateFit
    n_pairs: int
    argmax_pair: tuple[int, int]


def fit_holder_modulus(
    u: GridFunction,
    spectrum: Spectrum,
    gamma: float,
    s: float,
    include_origin: bool = True,
) -> HolderReport:
    """Measure the Hölder-s seminorm of a trajectory in the V_gamma scale.

    sup_modulus is the maximum of ||u(t2) - u(t1)||_{V_gamma} / (t2-t1)^s
    over node pairs; the fit regresses log-increment against log-gap for
    increments from the base node (t = 0 when the first row is finite and
    include_origin is set, otherwise the first positive node).  Constant
    trajectories report modulus 0 with a zero fit.
    """
    if not (0.0 < s <= 1.0):
        raise ParameterError(f"Hölder exponent must lie in (0, 1], got {s}")
    t = u.grid.nodes
    coeffs = u.coeffs
    w = spectrum.eigenvalues ** (2.0 * gamma) if gamma != 0.0 else np.ones(u.n_modes)
    base = 0 if include_origin and bool(np.all(np.isfinite(coeffs[0]))) else 1

    sup = 0.0
    arg = (base, base)
    n_pairs = 0
    for i in range(base, t.size - 1):
        d = coeffs[i + 1 :] - coeffs[i]
        norms = np.sqrt((d * d * w).sum(axis=1))
        gaps = t[i + 1 :] - t[i]
        mods = norms / gaps ** s
        n_pairs += mods.size
        k = int(np.argmax(mods))
        if mods[k] > sup:
            sup = float(mods[k])
            arg = (i, i + 1 + k)

    d0 = coeffs[base + 1 :] - coeffs[base]
    norms0 = np.sqrt((d0 * d0 * w).sum(axis=1))
    gaps0 = t[base + 1 :] - t[base]
    keep = norms0 > 0.0
    if int(keep.sum()) >= 2:
        slope, stderr = _ols_loglog(gaps0[keep], norms0[keep])
        window = (float(gaps0[keep].min()), float(gaps0[keep].max()))
        fit = RateFit(slope, stderr, window, _norm_tag(gamma), int(keep.sum()))
    else:
        fit = RateFit(0.0, 0.0, (float(gaps0[0]), float(gaps0[-1])), _norm_tag(gamma), 0)
    return HolderReport(sup_modulus=sup, fit=fit, n_pairs=n_pairs, argmax_pair=arg)


# ---------------------------------------------------------------------------
# increment decomposition
#
# Per mode (m = rate, E_T = E_{alpha,1}(-m T^alpha), W = int_{t1}^{t2} kernel):
#   history shift      int_0^{t1} F(tau) [int_{t1-tau}^{t2-tau} w^{a-2}
#                      E_{a,a-1}(-m w^a) dw] dtau
#   recent source      int_{t1}^{t2} F(tau) kernel(t2 - tau) dtau
#   terminal data      -m phi W / E_T
#   terminal source    +m (F * kernel)(T) W / E_T
# The first term is integrated through E_{alpha,alpha-1} by Gauss-Legendre
# panels (an evaluation path the solver never uses), so the four terms
# summing to u(t2) - u(t1) exercises a genuine identity, not a tautology.

_GL_OUTER = np.polynomial.legendre.leggauss(8)
_GL_INNER = np.polynomial.legendre.leggauss(12)
_PANEL_SPAN = 1.5  # max log-variation handed to one inner Gauss-Legendre panel
_MAX_PANELS = 40
_EDGE_PANELS = 8
_EDGE_RATIO = 6.0


def _inner_difference(
    alpha: float, rates: np.ndarray, a_arr: np.ndarray, b_arr: np.ndarray
) -> np.ndarray:
    """int_a^b w^{alpha-2} E_{alpha,alpha-1}(-m w^alpha) dw per (pair, mode).

    Substituting v = w^{alpha-1} flattens the endpoint power so the
    integrand is bounded; panels are log-spaced in v (the bounds span many
    decades when a is tiny) with fixed-order Gauss-Legendre on each.
    """
    a_arr = np.asarray(a_arr, dtype=float)
    b_arr = np.asarray(b_arr, dtype=float)
    if alpha == 1.0:
        # the kernel difference collapses to plain exponentials
        return np.exp(-np.outer(b_arr, rates)) - np.exp(-np.outer(a_arr, rates))
    lva = (alpha - 1.0) * np.log(a_arr)
    lvb = (alpha - 1.0) * np.log(b_arr)  # lvb < lva since alpha < 1
    span = float(np.max(lva - lvb))
    # the argument of E varies by alpha/(1-alpha) log units per unit of
    # log v, so panel count must follow the larger of the two spans
    stretch = max(1.0, alpha / (1.0 - alpha))
    n_panels = int(min(_MAX_PANELS, max(2, math.ceil(span * stretch / _PANEL_SPAN))))
    frac = np.linspace(0.0, 1.0, n_panels + 1)
    edges = lvb[:, None] + (lva - lvb)[:, None] * frac
    xg, wg = _GL_INNER
    mid = 0.5 * (edges[:, :-1] + edges[:, 1:])
    half = 0.5 * (edges[:, 1:] - edges[:, :-1])
    v = np.exp(mid[..., None] + half[..., None] * xg)
    wts = half[..., None] * wg * v  # dv = v d(log v)
    warg = v ** (alpha / (alpha - 1.0))  # w^alpha at the node
    e = mlf_grid(alpha, alpha - 1.0, -warg[..., None] * rates)
    return np.einsum("png,pngj->pj", wts, e) / (1.0 - alpha)


def _windowed_convolution(
    F_mat: np.ndarray, alpha: float, rates: np.ndarray, t: np.ndarray, n1: int, n2: int
) -> np.ndarray:
    """(F * kernel)(t2) restricted to the source cells inside [t1, t2]."""
    omega = t[n2] - t[n1 : n2 + 1]
    z = -np.outer(omega ** alpha, rates)
    e1 = mlf_grid(alpha, alpha + 1.0, z)
    e2 = mlf_grid(alpha, alpha + 2.0, z)
    phi = (omega ** alpha)[:, None] * e1
    psi = (omega ** (alpha + 1.0))[:, None] * (e1 - e2)
    mu0 = phi[:-1] - phi[1:]
    mu1 = psi[:-1] - psi[1:]
    wa = omega[:-1, None]
    seg = F_mat[n1 : n2 + 1]
    slopes = np.diff(seg, axis=0) / np.diff(t[n1 : n2 + 1])[:, None]
    return np.einsum("ij,ij->j", seg[:-1], mu0) + np.einsum(
        "ij,ij->j", slopes, wa * mu0 - mu1
    )


def _shifted_kernel_integral(
    F_mat: np.ndarray, alpha: float, rates: np.ndarray, t: np.ndarray, n1: int, n2: int
) -> np.ndarray:
    """The history-shift double integral over tau in [0, t1], all modes.

    Regular source cells take Gauss-Legendre in tau directly.  On the
    cell touching t1 the inner integral grows like (t1 - tau)^{alpha-1},
    so tau is re-parameterised by sigma = (t1 - tau)^alpha (which makes
    the integrand bounded) on geometrically shrinking panels.
    """
    t1 = t[n1]
    t2 = t[n2]
    N = rates.size
    total = np.zeros(N)
    slopes = np.diff(F_mat[: n1 + 1], axis=0) / np.diff(t[: n1 + 1])[:, None]
    xg, wg = _GL_OUTER

    reg = n1 if alpha == 1.0 else n1 - 1  # t1-adjacent cell is regular at alpha = 1
    if reg >= 1:
        lo = t[:reg]
        hi = t[1 : reg + 1]
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        tau = mid[:, None] + half[:, None] * xg
        w_tau = half[:, None] * wg
        Fv = F_mat[:reg, None, :] + slopes[:reg, None, :] * (tau - lo[:, None])[..., None]
        A = _inner_difference(alpha, rates, (t1 - tau).ravel(), (t2 - tau).ravel())
        total += np.einsum("cg,cgj->j", w_tau, Fv * A.reshape(tau.shape + (N,)))

    if alpha < 1.0:
        i = n1 - 1
        h = t1 - t[i]
        s_hi = h ** alpha
        geo = s_hi * _EDGE_RATIO ** (-np.arange(_EDGE_PANELS, dtype=float))
        edges = np.concatenate([geo, [0.0]])  # descending to 0
        p_lo = edges[1:]
        p_hi = edges[:-1]
        xe, we = _GL_INNER
        sig = (0.5 * (p_lo + p_hi)[:, None] + 0.5 * (p_hi - p_lo)[:, None] * xe).ravel()
        w_sig = (0.5 * (p_hi - p_lo)[:, None] * we).ravel()
        # protect the power from underflow at extreme parameters; the
        # integrand is constant in that range anyway
        uu = np.maximum(sig ** (1.0 / alpha), 1e-300)
        tau_e = t1 - uu
        Fv = F_mat[i] + slopes[i] * (tau_e - t[i])[:, None]
        A = _inner_difference(alpha, rates, uu, uu + (t2 - t1))
        jac = sig ** (1.0 / alpha - 1.0) / alpha
        total += ((w_sig * jac)[:, None] * Fv * A).sum(axis=0)
    return total


def increment_decomposition(
    prob: LinearProblem, t1_index: int, t2_index: int
) -> tuple[ModalVector, ModalVector, ModalVector, ModalVector]:
    """Split u(t2) - u(t1) into its four constituent integrals.

    Returns (history shift, recent source, terminal data, terminal
    source) as ModalVectors; their sum reproduces the solver increment
    to quadrature precision.  t1_index = 0 makes the history term zero
    by construction; t1_index = t2_index returns four zero vectors.
    """
    grid = prob.grid_or()
    K = grid.n_steps
    n1 = int(t1_index)
    n2 = int(t2_index)
    if not (0 <= n1 <= n2 <= K):
        raise ParameterError(
            f"need 0 <= t1_index <= t2_index <= {K}, got ({t1_index}, {t2_index})"
        )
    N = prob.spectrum.count
    label = prob.spectrum.label
    if n1 == n2:
        z = np.zeros(N)
        return tuple(ModalVector(z.copy(), label) for _ in range(4))

    t = grid.nodes
    rates = prob.rates
    alpha = prob.alpha
    decay = _decay_tables(prob, grid)
    denom = decay[-1]
    _check_denominators(prob, denom)

    window = np.array(
        [kernel_antiderivative(alpha, float(m), t[n1], t[n2]) for m in rates]
    )
    conv = _conv_matrix(prob)
    term_data = -rates * prob.phi.coeffs * window / denom
    term_source = rates * conv[-1] * window / denom

    if prob.F is None or not np.any(prob.F.coeffs):
        recent = np.zeros(N)
        history = np.zeros(N)
    else:
        F_mat = prob.F.coeffs
        recent = _windowed_convolution(F_mat, alpha, rates, t, n1, n2)
        if n1 == 0:
            history = np.zeros(N)
        else:
            history = _shifted_kernel_integral(F_mat, alpha, rates, t, n1, n2)

    return (
        ModalVector(history, label),
        ModalVector(recent, label),
        ModalVector(term_data, label),
        ModalVector(term_source, label),
    )


# ---------------------------------------------------------------------------
# spectral Caputo derivative


def spectral_caputo(
    u: GridFunction, prob: LinearProblem, gamma_out: float | None = None
) -> GridFunction:
    """Fractional time derivative of a backward solution, mode by mode.

    Assembled from the problem data (source, convolution, decay ratio)
    rather than by differencing u, so that comparing it with the L1
    finite-difference derivative cross-checks two independent schemes:

        D u_j = F_j - m_j (F_j * kernel) - m_j (phi_j - (F_j * kernel)(T))
                                            E(t) / E(T).

    When gamma_out is given, flags carry sup_{t_n > 0} of
    t^alpha ||D u(t)||_{V_gamma_out} (the weighted boundedness figure).
    """
    grid = u.grid
    if prob.F is not None and not np.array_equal(grid.nodes, prob.F.grid.nodes):
        raise MeshMismatchError(
            "the trajectory grid must be the source grid when F is given"
        )
    rates = prob.rates
    decay = _decay_tables(prob, grid)
    denom = decay[-1]
    _check_denominators(prob, denom)
    if prob.F is None or not np.any(prob.F.coeffs):
        F_mat = np.zeros_like(u.coeffs)
        conv = np.zeros_like(u.coeffs)
    else:
        F_mat = prob.F.coeffs
        conv = _conv_matrix(prob)
    ratio = decay / denom
    deriv = F_mat - rates * conv - rates * (prob.phi.coeffs - conv[-1]) * ratio
    flags: dict = {"kind": "caputo-spectral"}
    if gamma_out is not None:
        t_pos = grid.nodes[1:]
        norms = _row_norms(deriv[1:], prob.spectrum, gamma_out)
        flags["gamma_out"] = float(gamma_out)
        flags["weighted_sup"] = float(np.max(t_pos ** prob.alpha * norms))
    return GridFunction(
        grid=grid, coeffs=deriv, spectrum_ref=prob.spectrum.label, flags=flags
    )


# ---------------------------------------------------------------------------
# round-trip experiment and edge-regularity data


@dataclass(frozen=True)
class RoundtripReport:
    """Forward -> terminal read-off -> backward reconstruction figures."""

    max_deviation: float
    node_norm_deviation: float
    terminal_gap: float
    max_amplification: float
    n_modes: int
    grid: TimeGrid
    reference_multiple: int = 1
    reference_deviation: float | None = None


def roundtrip_experiment(
    spectrum: Spectrum,
    alpha: float,
    beta: float,
    T: float,
    u0,
    F: GridFunction | None = None,
    grid: TimeGrid | None = None,
    reference_multiple: int = 1,
    F_fine: GridFunction | None = None,
) -> RoundtripReport:
    """Solve forward, take phi = u(T), solve backward, compare.

    max_deviation compares the reconstruction against the forward run on
    the shared grid (these cancel algebraically, so it isolates rounding
    and mode-degeneracy effects).  With reference_multiple = r > 1 the
    forward problem is re-solved on an r-times finer uniform grid and
    the backward solution is compared against that.  Pass F_fine, the
    source sampled on the fine grid itself, to expose the true O(h^2)
    sampling error of a smooth source; without it the fine solve reuses
    the piecewise-linear coarse data, for which product integration is
    exact, so the reference deviation only reflects rounding.
    """
    if F is not None:
        grid = F.grid
    elif grid is None:
        grid = TimeGrid.uniform(T)
    fwd = solve_forward_linear(spectrum, alpha, beta, T, u0, F, grid)
    phi = ModalVector(fwd.coeffs[-1].copy(), spectrum.label)
    prob = LinearProblem(spectrum, alpha, beta, T, phi, F)
    back = solve_backward_linear(prob, grid)
    diff = np.abs(back.coeffs - fwd.coeffs)
    ref_dev = None
    rm = int(reference_multiple)
    if rm > 1:
        if not grid.is_uniform:
            raise NonUniformGridError(
                "the reference refinement study needs a uniform grid"
            )
        fine = TimeGrid.uniform(T, grid.n_steps * rm)
        if F_fine is not None:
            if F is None:
                raise ParameterError("F_fine was given without a coarse F")
            if F_fine.grid.n_steps != fine.n_steps:
                raise MeshMismatchError(
                    f"F_fine lives on {F_fine.grid.n_steps} steps; the "
                    f"reference grid has {fine.n_steps}"
                )
        elif F is not None:
            cols = [
                np.interp(fine.nodes, grid.nodes, F.coeffs[:, j])
                for j in range(F.n_modes)
            ]
            F_fine = GridFunction(fine, np.column_stack(cols), F.spectrum_ref)
        fwd_fine = solve_forward_linear(spectrum, alpha, beta, T, u0, F_fine, fine)
        ref_dev = float(np.max(np.abs(back.coeffs - fwd_fine.coeffs[::rm])))
    elif F_fine is not None:
        raise ParameterError("F_fine needs reference_multiple > 1")
    return RoundtripReport(
        max_deviation=float(diff.max()),
        node_norm_deviation=float(np.max(np.sqrt((diff * diff).sum(axis=1)))),
        terminal_gap=float(np.max(np.abs(back.coeffs[-1] - phi.coeffs))),
        max_amplification=float(back.flags["max_amplification"]),
        n_modes=spectrum.count,
        grid=grid,
        reference_multiple=rm,
        reference_deviation=ref_dev,
    )


def edge_regularity_datum(
    spectrum: Spectrum, beta: float, gamma: float, epsilon: float = 0.01
) -> ModalVector:
    """Terminal datum at the edge of the V_{beta*gamma} class.

    Coefficient law phi_j = m_j^{-beta*gamma} j^{-1/2-epsilon}: the
    weighted square sum behaves like sum j^{-1-2 epsilon}, so the datum
    sits inside V_{beta*gamma} for every epsilon > 0 but leaves the class
    as epsilon -> 0.  Such data drive the sharp t^{-alpha*q} blow-up of
    backward solutions; smooth data (fast coefficient decay) do not.
    """
    if not (epsilon > 0.0):
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    j = np.arange(1, spectrum.count + 1, dtype=float)
    c = spectrum.eigenvalues ** (-beta * gamma) * j ** (-0.5 - epsilon)
    return ModalVector(c, spectrum.label)
