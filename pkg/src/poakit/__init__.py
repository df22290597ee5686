"""Batch analytics for commuting location traces.

Turns raw timestamped location streams into game-theoretic efficiency
measurements: per-trip empirical regret, empirical price-of-anarchy bounds
against an optimal-duration oracle, and cross-day route/mode consistency.
Ships a nonatomic congestion-game simulator (Frank-Wolfe equilibrium and
social-optimum solver) used to validate the whole pipeline against
analytically known efficiency ratios.
"""

__version__ = "0.1.0"

from .errors import PoakitError

__all__ = ["PoakitError", "__version__"]
