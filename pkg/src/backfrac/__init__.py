"""Terminal-value (backward) solvers for time-space fractional diffusion.

The package is organised around the modal picture of
c-Caputo_t^alpha u = -L^beta u + F on (0, T) with data u(T, .) = phi:

* special   -- Mittag-Leffler family and certified decay bounds
* spectral  -- eigenpairs of the spatial operator, fractional powers, norms
* modal     -- per-mode forward/backward solutions on a time grid
* operators -- assembled solution operators and the ill-posedness probe
* picard    -- gated fixed-point iteration for semilinear sources
* verify    -- diagnostics: blow-up rates, increment decomposition,
               spectral Caputo residuals, exponent-regime validation
* cli       -- reproducible command-line front end
"""
from __future__ import annotations

__version__ = "0.1.0"

from .special import (  # noqa: F401
    MLBoundConstants,
    MLParams,
    beta,
    certify_ml_bounds,
    gamma,
    kernel_antiderivative,
    mlf,
    mlf_grid,
    mlf_tilde,
)
