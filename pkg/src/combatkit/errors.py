"""Exception types shared across the package.

Every error raised by the library derives from :class:`CombatError` so callers
(and the CLI) can classify failures without string matching. The CLI maps
subclasses onto its exit codes; see ``combatkit.cli``.
"""

from __future__ import annotations


class CombatError(Exception):
    """Base class for all combatkit errors."""


class SchemaError(CombatError):
    """Malformed table, config, or model file (CLI exit code 2)."""


class InsufficientData(CombatError):
    """Too few subjects for the requested fit or sample."""


class InsufficientRegions(CombatError):
    """Pooling across regions requested with fewer than two regions."""


class CovariateMismatch(CombatError):
    """Covariate names, order, or dimension disagree between inputs."""


class RegionMismatch(CombatError):
    """Region id sets disagree between datasets that must align."""


class UnknownRegion(CombatError):
    """A region id is absent from the fitted model."""


class UnknownSite(CombatError):
    """A site id is absent from the fitted model."""


class SingularDesign(CombatError):
    """Normal-equation system is singular or numerically unusable."""


class DegenerateVariance(CombatError):
    """A variance that must be positive is zero (or a zero-variance scale
    would be applied to nonzero residuals)."""


class ConvergenceFailure(CombatError):
    """An iterative estimate failed to converge within its cap.

    Carries the last iterate so callers can inspect how far it got.
    """

    def __init__(self, message: str, last_iterate=None, iterations: int | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class AlignmentError(CombatError):
    """Subject/region keys fail to line up between paired structures."""
