"""Exception types shared across the package.

The CLI maps these onto process exit codes; library callers can catch them
individually.
"""
from __future__ import annotations


class BackfracError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(BackfracError, ValueError):
    """An argument is outside the documented domain."""


class PoleError(ParameterError):
    """Evaluation requested exactly at a pole of the Gamma function."""


class CertificationError(BackfracError):
    """A numerical certification (bound scan, tolerance check) failed."""


class ResolutionError(ParameterError):
    """Spatial mesh too coarse for the requested number of modes."""


class EllipticityError(ParameterError):
    """Diffusion coefficient not uniformly positive on the sampled mesh."""


class MeshMismatchError(ParameterError):
    """Arrays attached to different meshes/grids were combined."""


class NonUniformGridError(ParameterError):
    """An operation restricted to uniform time grids got a graded one."""


class DegenerateFitError(BackfracError):
    """A rate fit was requested on data that vanishes over the fit window."""


class DegenerateModeError(BackfracError):
    """Terminal-value denominator underflowed for some mode."""

    def __init__(self, mode_index: int, amplification: float, message: str = ""):
        self.mode_index = mode_index
        self.amplification = amplification
        super().__init__(
            message
            or f"mode {mode_index}: terminal factor below underflow threshold "
            f"(amplification ~ {amplification:.3e})"
        )


class GateRefusedError(BackfracError):
    """Contraction gate k0 >= 1 and no override was given."""

    def __init__(self, k0: float):
        self.k0 = k0
        super().__init__(
            f"contraction gate refused: k0 = {k0:.6g} >= 1 "
            "(pass override_gate=True to run anyway)"
        )


class DivergenceError(BackfracError):
    """Fixed-point iteration distances grew for several consecutive steps."""

    def __init__(self, distances):
        self.distances = list(distances)
        super().__init__(
            "fixed-point iteration diverging; last distances: "
            + ", ".join(f"{d:.3e}" for d in self.distances[-6:])
        )


class AccuracyWarning(UserWarning):
    """Requested tolerance could not be certified for this evaluation."""
