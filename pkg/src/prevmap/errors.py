"""Exception types shared across the package."""


class PrevmapError(Exception):
    """Base class for all package errors."""


class SurveyFormatError(PrevmapError):
    """Malformed or invalid survey CSV content (carries the file line number)."""


class BoundsError(PrevmapError):
    """Location falls outside a raster, lattice hull, or BAU grid."""


class NumericalError(PrevmapError):
    """Linear-algebra failure (e.g. a covariance matrix that will not factorize)."""


class FitError(PrevmapError):
    """Model fitting failed; the message says where and the `context` dict says why."""

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = dict(context)


class ConfigError(PrevmapError):
    """Invalid run configuration; the message names the offending field."""
