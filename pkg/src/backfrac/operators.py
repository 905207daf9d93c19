"""Whole-spectrum solution operators for the linear terminal-value problem.

Aggregates the per-mode solvers over a Spectrum: the source operator O1
(convolution term), the terminal-data propagator O2 (the ratio of
relaxation factors that carries the backward amplification), their
composition O3, and the forward/backward linear solvers built from them.
The backward solver keeps two permanently separate evaluation paths --
direct per-mode formula and operator assembly -- because backward
amplification can magnify silent per-mode bugs past any plain test's
noticing; the paths must agree to 1e-10 and that agreement is itself a
test.

Also hosts the truncated-sum probe that exhibits the unboundedness of
the backward propagator at t = 0: partial sums S_N along a slowly
decaying terminal datum must dominate a harmonic-number lower bound.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CertificationError,
    DegenerateModeError,
    MeshMismatchError,
    ParameterError,
)
from .modal import TimeGrid, backward_mode, convolution_profile, forward_mode
from .special import MLBoundConstants, certify_ml_bounds, mlf_grid
from .spectral import ModalVector, Spectrum

__all__ = [
    "GridFunction",
    "LinearProblem",
    "ProbeTable",
    "o1_apply",
    "o2_apply",
    "o3_apply",
    "solve_backward_linear",
    "solve_backward_via_operators",
    "solve_forward_linear",
    "unboundedness_probe",
    "weighted_sup",
    "grid_function_to_csv",
    "grid_function_from_csv",
    "problem_metadata",
]

_UNDERFLOW_GUARD = 1e-290


@dataclass(frozen=True)
class GridFunction:
    """Modal coefficients over a time grid: coeffs[n, j] = u_j(t_n)."""

    grid: TimeGrid
    coeffs: np.ndarray
    spectrum_ref: str = ""
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        object.__setattr__(self, "coeffs", coeffs)
        if coeffs.ndim != 2:
            raise ParameterError("GridFunction coefficients must be 2-D (nodes x modes)")
        if coeffs.shape[0] != self.grid.nodes.size:
            raise MeshMismatchError(
                f"{coeffs.shape[0]} coefficient rows for {self.grid.nodes.size} nodes"
            )
        if not np.all(np.isfinite(coeffs[1:])):
            raise ParameterError("coefficients must be finite at all t_n > 0")

    @property
    def n_modes(self) -> int:
        return int(self.coeffs.shape[1])

    @classmethod
    def zeros(cls, grid: TimeGrid, n_modes: int, spectrum_ref: str = "") -> "GridFunction":
        return cls(grid=grid, coeffs=np.zeros((grid.nodes.size, n_modes)),
                   spectrum_ref=spectrum_ref)


@dataclass(frozen=True)
class LinearProblem:
    """Linear terminal-value problem: D^alpha u = -L^beta u + F, u(T) = phi.

    F is the source GridFunction (independent of u); None means F = 0.
    alpha = 1 is admitted as the classical-diffusion limit of every
    formula used here, although the amplification then turns exponential
    and modes degenerate much sooner.
    """

    spectrum: Spectrum
    alpha: float
    beta: float
    T: float
    phi: ModalVector
    F: GridFunction | None = None

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ParameterError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not (0.0 < self.beta <= 1.0):
            raise ParameterError(f"beta must lie in (0, 1], got {self.beta}")
        if not (self.T > 0.0):
            raise ParameterError(f"horizon T must be > 0, got {self.T}")
        n = self.spectrum.count
        phi = self.phi if isinstance(self.phi, ModalVector) else ModalVector(self.phi)
        object.__setattr__(self, "phi", phi)
        if phi.coeffs.shape != (n,):
            raise MeshMismatchError(
                f"terminal datum has {phi.coeffs.size} coefficients for {n} modes"
            )
        if self.F is not None:
            if self.F.n_modes != n:
                raise MeshMismatchError(
                    f"source has {self.F.n_modes} mode columns for {n} modes"
                )
            if abs(self.F.grid.horizon - self.T) > 1e-12 * max(1.0, self.T):
                raise MeshMismatchError(
                    f"source grid horizon {self.F.grid.horizon} != problem T {self.T}"
                )
        object.__setattr__(self, "_cache", {})

    @property
    def rates(self) -> np.ndarray:
        """Per-mode relaxation rates m_j^beta."""
        return self.spectrum.eigenvalues ** self.beta

    def grid_or(self, grid: TimeGrid | None = None) -> TimeGrid:
        if self.F is not None:
            return self.F.grid
        if grid is not None:
            return grid
        return TimeGrid.uniform(self.T)


# ---------------------------------------------------------------------------
# cached per-problem tables


def _decay_tables(prob: LinearProblem, grid: TimeGrid):
    """E_{alpha,1}(-m_j t_n^alpha) matrix and its terminal row."""
    cache = prob.__dict__.setdefault("_cache", {})
    key = ("decay", grid.nodes.tobytes())
    if key not in cache:
        z = -np.outer(grid.nodes ** prob.alpha, prob.rates)
        decay = mlf_grid(prob.alpha, 1.0, z)
        cache[key] = decay
    return cache[key]


def _check_denominators(prob: LinearProblem, denom: np.ndarray):
    bad = np.nonzero(denom < _UNDERFLOW_GUARD)[0]
    if bad.size:
        j = int(bad[0])
        raise DegenerateModeError(
            mode_index=j,
            amplification=math.inf,
            message=(
                f"{bad.size} mode(s) underflow the terminal decay factor "
                f"(first: mode {j}, rate {prob.rates[j]:.3g}); the backward "
                "formula cannot represent their amplification"
            ),
        )


def _conv_matrix(prob: LinearProblem) -> np.ndarray:
    """(F_j * kernel)(t_n) for every mode; zeros when F is absent."""
    grid = prob.grid_or()
    if prob.F is None or not np.any(prob.F.coeffs):
        return np.zeros((grid.nodes.size, prob.spectrum.count))
    cache = prob.__dict__.setdefault("_cache", {})
    if "conv" not in cache:
        cache["conv"] = _convolve_all(prob.F.coeffs, prob.alpha, prob.rates, grid)
    return cache["conv"]


def _convolve_all(
    F_mat: np.ndarray, alpha: float, rates: np.ndarray, grid: TimeGrid
) -> np.ndarray:
    """Product-integration convolution for every mode column at once.

    Uniform grids share one moment table per mode (differences are grid
    nodes again); non-uniform grids fall back to the per-mode path.
    """
    t = grid.nodes
    K = grid.n_steps
    N = rates.size
    out = np.zeros((K + 1, N))
    if not grid.is_uniform:
        for j in range(N):
            out[:, j] = convolution_profile(F_mat[:, j], alpha, float(rates[j]), grid)
        return out
    u = -np.outer(t ** alpha, rates)
    e1 = mlf_grid(alpha, alpha + 1.0, u)
    e2 = mlf_grid(alpha, alpha + 2.0, u)
    pow_a = t ** alpha
    phi = pow_a[:, None] * e1
    psi = (t ** (alpha + 1.0))[:, None] * (e1 - e2)
    slopes = np.diff(F_mat, axis=0) / np.diff(t)[:, None]
    for n in range(1, K + 1):
        mu0 = phi[n:0:-1] - phi[n - 1 :: -1]
        mu1 = psi[n:0:-1] - psi[n - 1 :: -1]
        wa = t[n:0:-1, None]
        out[n] = np.einsum("ij,ij->j", F_mat[:n], mu0) + np.einsum(
            "ij,ij->j", slopes[:n], wa * mu0 - mu1
        )
    return out


# ---------------------------------------------------------------------------
# the three solution operators


def o1_apply(prob: LinearProblem, t_index: int) -> ModalVector:
    """Source operator: coefficient j is (F_j * kernel)(t_n)."""
    grid = prob.grid_or()
    n = int(t_index)
    if not (0 <= n <= grid.n_steps):
        raise ParameterError(f"t_index must lie in [0, {grid.n_steps}], got {n}")
    conv = _conv_matrix(prob)
    return ModalVector(conv[n].copy(), prob.spectrum.label)


def o2_apply(prob: LinearProblem, v, t_index: int) -> ModalVector:
    """Terminal-data propagator: v_j E_{a,1}(-m_j t^a) / E_{a,1}(-m_j T^a)."""
    grid = prob.grid_or()
    n = int(t_index)
    if not (0 <= n <= grid.n_steps):
        raise ParameterError(f"t_index must lie in [0, {grid.n_steps}], got {n}")
    c = np.asarray(getattr(v, "coeffs", v), dtype=float)
    if c.shape != (prob.spectrum.count,):
        raise MeshMismatchError(
            f"vector has {c.size} coefficients for {prob.spectrum.count} modes"
        )
    decay = _decay_tables(prob, grid)
    denom = decay[-1]
    _check_denominators(prob, denom)
    return ModalVector(c * decay[n] / denom, prob.spectrum.label)


def o3_apply(prob: LinearProblem, t_index: int) -> ModalVector:
    """Composition -O2(t) O1(T): cancels the source's terminal footprint."""
    grid = prob.grid_or()
    at_T = o1_apply(prob, grid.n_steps)
    propagated = o2_apply(prob, at_T, t_index)
    return ModalVector(-propagated.coeffs, prob.spectrum.label)


# ---------------------------------------------------------------------------
# linear solvers


def solve_backward_linear(
    prob: LinearProblem, grid: TimeGrid | None = None
) -> GridFunction:
    """Terminal-value solution by the direct per-mode formula.

    u_j(t_n) = conv_j(t_n) + [phi_j - conv_j(T)] decay_j(t_n)/decay_j(T);
    u(T) = phi holds exactly.  An explicit sampling grid may be supplied
    when the problem carries no source (otherwise the source's grid is
    the solution grid).
    """
    grid = prob.grid_or(grid)
    if prob.F is not None and not np.array_equal(grid.nodes, prob.F.grid.nodes):
        raise MeshMismatchError("solution grid must be the source grid when F is given")
    decay = _decay_tables(prob, grid)
    denom = decay[-1]
    _check_denominators(prob, denom)
    if prob.F is None or not np.any(prob.F.coeffs):
        conv = np.zeros((grid.nodes.size, prob.spectrum.count))
    else:
        conv = _conv_matrix(prob)
    amp = (prob.phi.coeffs - conv[-1]) / denom
    coeffs = conv + decay * amp
    return GridFunction(
        grid=grid,
        coeffs=coeffs,
        spectrum_ref=prob.spectrum.label,
        flags={
            "direction": "backward",
            "t0_amplified": True,
            "max_amplification": float(np.max(1.0 / denom)),
        },
    )


def solve_backward_via_operators(
    prob: LinearProblem, grid: TimeGrid | None = None
) -> GridFunction:
    """Independent assembly path: u(t_n) = O1(t_n) + O2(t_n) phi + O3(t_n).

    Kept deliberately separate from solve_backward_linear (node loop over
    the three operator applications, no shared intermediate arrays beyond
    the cached tables) as the permanent cross-check on the direct path.
    """
    grid = prob.grid_or(grid)
    if prob.F is not None and not np.array_equal(grid.nodes, prob.F.grid.nodes):
        raise MeshMismatchError("solution grid must be the source grid when F is given")
    K = grid.n_steps
    N = prob.spectrum.count
    coeffs = np.empty((K + 1, N))
    for n in range(K + 1):
        term = o1_apply(prob, n).coeffs + o2_apply(prob, prob.phi, n).coeffs
        coeffs[n] = term + o3_apply(prob, n).coeffs
    return GridFunction(
        grid=grid,
        coeffs=coeffs,
        spectrum_ref=prob.spectrum.label,
        flags={"direction": "backward", "path": "operator-assembly"},
    )


def solve_forward_linear(
    spectrum: Spectrum,
    alpha: float,
    beta: float,
    T: float,
    u0,
    F: GridFunction | None = None,
    grid: TimeGrid | None = None,
) -> GridFunction:
    """Initial-value solution aggregated over modes (the round-trip oracle)."""
    if not (0.0 < alpha <= 1.0):
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    if not (0.0 < beta <= 1.0):
        raise ParameterError(f"beta must lie in (0, 1], got {beta}")
    if F is not None:
        grid = F.grid
    elif grid is None:
        grid = TimeGrid.uniform(T)
    if abs(grid.horizon - T) > 1e-12 * max(1.0, T):
        raise MeshMismatchError(f"grid horizon {grid.horizon} != T {T}")
    c0 = np.asarray(getattr(u0, "coeffs", u0), dtype=float)
    if c0.shape != (spectrum.count,):
        raise MeshMismatchError(
            f"initial datum has {c0.size} coefficients for {spectrum.count} modes"
        )
    rates = spectrum.eigenvalues ** beta
    decay = mlf_grid(alpha, 1.0, -np.outer(grid.nodes ** alpha, rates))
    if F is None or not np.any(F.coeffs):
        conv = 0.0
    else:
        conv = _convolve_all(F.coeffs, alpha, rates, grid)
    return GridFunction(
        grid=grid,
        coeffs=decay * c0 + conv,
        spectrum_ref=spectrum.label,
        flags={"direction": "forward"},
    )


# ---------------------------------------------------------------------------
# ill-posedness probe


@dataclass(frozen=True)
class ProbeTable:
    """Partial sums of the t = 0 backward-operator norm against their lower bounds.

    lower_bounds uses the sharp constant c_lo (the asserted divergence
    bound for the pinned configuration); safe_lower_bounds uses c_hi and
    follows rigorously from the certified envelope for any parameters.
    """

    truncations: np.ndarray
    partial_sums: np.ndarray
    lower_bounds: np.ndarray
    safe_lower_bounds: np.ndarray
    forward_sums: np.ndarray
    harmonic: np.ndarray
    c_lo: float
    c_hi: float
    alpha: float
    T: float

    def rows(self):
        for i, N in enumerate(self.truncations):
            yield {
                "N": int(N),
                "S_N": float(self.partial_sums[i]),
                "lower_bound": float(self.lower_bounds[i]),
                "safe_lower_bound": float(self.safe_lower_bounds[i]),
                "forward_S_N": float(self.forward_sums[i]),
                "H_N": float(self.harmonic[i]),
            }


def unboundedness_probe(
    spectrum: Spectrum,
    alpha: float,
    beta: float,
    T: float,
    N_list,
    bounds: MLBoundConstants | None = None,
) -> ProbeTable:
    """Divergent truncated sums witnessing backward-operator unboundedness.

    With terminal data v_{0,j} = j^{-1/2} m_j^{-beta}, the t = 0 energy
    S_N = sum_{j<=N} v_{0,j}^2 / E_{alpha,1}(-m_j^beta T^alpha)^2 must
    dominate c_lo^{-2} T^{2 alpha} H_N (harmonic number H_N), which
    diverges logarithmically.  Violation of the certified bound raises;
    the returned table also carries the convergent forward-direction
    contrast sums.
    """
    N_list = np.asarray(sorted(int(n) for n in N_list), dtype=int)
    if N_list.size == 0 or N_list[0] < 1:
        raise ParameterError("N_list must contain positive truncation levels")
    if N_list[-1] > spectrum.count:
        raise ParameterError(
            f"largest truncation {N_list[-1]} exceeds spectrum size {spectrum.count}"
        )
    if bounds is None:
        bounds = certify_ml_bounds(alpha)
    m_beta = spectrum.eigenvalues[: N_list[-1]] ** beta
    j = np.arange(1, N_list[-1] + 1, dtype=float)
    v0 = m_beta ** (-1.0) / np.sqrt(j)
    e_T = mlf_grid(alpha, 1.0, -m_beta * T ** alpha)
    terms = (v0 / e_T) ** 2
    fwd_terms = (v0 * e_T) ** 2
    cum = np.cumsum(terms)
    fwd_cum = np.cumsum(fwd_terms)
    harm = np.cumsum(1.0 / j)
    S = cum[N_list - 1]
    H = harm[N_list - 1]
    scale = T ** (2.0 * alpha) * H
    lower = bounds.c_lo ** (-2.0) * scale
    safe = bounds.c_hi ** (-2.0) * scale
    # the c_hi form follows from E <= c_hi/(1+x) alone and must never fail
    if np.any(S < safe):
        k = int(np.nonzero(S < safe)[0][0])
        raise CertificationError(
            f"S_N fell below the envelope-implied bound at N = {N_list[k]}: "
            f"{S[k]:.6g} < {safe[k]:.6g}; the certified constants are inconsistent"
        )
    if np.any(S < lower):
        k = int(np.nonzero(S < lower)[0][0])
        raise CertificationError(
            f"S_N fell below the sharp divergence bound at N = {N_list[k]}: "
            f"{S[k]:.6g} < {lower[k]:.6g} (holds only for sufficiently "
            "heavy per-mode arguments; see the probe documentation)"
        )
    return ProbeTable(
        truncations=N_list,
        partial_sums=S,
        lower_bounds=lower,
        safe_lower_bounds=safe,
        forward_sums=fwd_cum[N_list - 1],
        harmonic=H,
        c_lo=bounds.c_lo,
        c_hi=bounds.c_hi,
        alpha=alpha,
        T=T,
    )


def weighted_sup(u: GridFunction, exponent: float) -> float:
    """max over t_n > 0 of t_n^exponent ||u(t_n)||_{l2 over modes}.

    The measurable form of the t^{-exponent} growth bounds: finiteness of
    this sup at truncation is what the continuum estimates predict.
    """
    t = u.grid.nodes[1:]
    norms = np.sqrt(np.sum(u.coeffs[1:] ** 2, axis=1))
    return float(np.max(t ** exponent * norms))


# ---------------------------------------------------------------------------
# export


def grid_function_to_csv(gf: GridFunction) -> str:
    """Matrix CSV: first row is the node times, then one row per mode."""
    lines = [",".join(repr(float(t)) for t in gf.grid.nodes)]
    for j in range(gf.n_modes):
        lines.append(",".join(repr(float(v)) for v in gf.coeffs[:, j]))
    return "\n".join(lines) + "\n"


def grid_function_from_csv(text: str, spectrum_ref: str = "") -> GridFunction:
    rows = [
        [float(v) for v in line.split(",")]
        for line in text.splitlines()
        if line.strip()
    ]
    if len(rows) < 2:
        raise ParameterError("grid-function CSV needs a time row and a mode row")
    nodes = np.asarray(rows[0])
    coeffs = np.asarray(rows[1:]).T
    return GridFunction(grid=TimeGrid(nodes), coeffs=coeffs, spectrum_ref=spectrum_ref)


def problem_metadata(prob: LinearProblem, **extra) -> dict:
    """JSON-able sidecar describing a problem and run flags."""
    grid = prob.grid_or()
    meta = {
        "alpha": prob.alpha,
        "beta": prob.beta,
        "T": prob.T,
        "n_modes": prob.spectrum.count,
        "grid": {"n_steps": grid.n_steps, "kind": grid.kind, "grade": grid.grade},
        "spectrum": prob.spectrum.label,
        "homogeneous": prob.F is None or not bool(np.any(prob.F.coeffs)),
    }
    meta.update(extra)
    json.dumps(meta)  # fail fast if a flag is not serialisable
    return meta
