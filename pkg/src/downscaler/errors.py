"""Exception types shared across the package."""


class DownscalerError(Exception):
    """Base class for all errors raised by this package."""


class OutOfDomain(DownscalerError):
    """A point lies outside every grid cell."""


class DomainError(DownscalerError):
    """A value violates the domain of a transform (sqrt of negative, log of non-positive)."""


class ParseError(DownscalerError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateRecord(DownscalerError):
    """More than one record for the same (site, day, pollutant) key."""


class DimensionMismatch(DownscalerError):
    """Array or parameter dimensions are inconsistent."""


class NotPositiveDefinite(DownscalerError):
    """A covariance matrix failed Cholesky factorization even after the ridge."""


class UnsupportedVariant(DownscalerError):
    """The requested coregionalization variant has no closed-form expression."""


class NonFiniteLikelihood(DownscalerError):
    """The likelihood evaluated to NaN or infinity during sampling."""


class NonStationary(DownscalerError):
    """An autoregressive coefficient with |rho| >= 1 reached the sampler."""


class InsufficientDraws(DownscalerError):
    """Too few draws for the requested diagnostic or score."""


class SingularSystem(DownscalerError):
    """A kriging system could not be solved even after the ridge."""


class TooFewSites(DownscalerError):
    """A day has too few sites for a stable variogram/REML fit."""


class EmptyMask(DownscalerError):
    """A score was requested over zero observed entries."""


class EmptyRegion(DownscalerError):
    """A block average was requested over an empty cell set."""


class DrawCountMismatch(DownscalerError):
    """Two predictive sample sets do not have matched draws."""


class MissingGridOutput(DownscalerError):
    """No numerical-model output for a (cell, day, pollutant) needed by the model."""


class InvalidInterval(DownscalerError):
    """Interval bounds violate l <= u or alpha outside (0, 1)."""


class RankDeficient(DownscalerError):
    """A per-site regression design matrix is rank deficient."""


class ConfigError(DownscalerError):
    """The run configuration is malformed or inconsistent."""
