"""Exception hierarchy shared by every stage of the fusion pipeline."""


class FusionError(Exception):
    """Base class for all package errors."""


class ConfigError(FusionError, ValueError):
    """Inconsistent dimensions, invalid parameters or a malformed config file."""


class EstimationError(FusionError, ArithmeticError):
    """A factorization failed inside the filter or smoother."""

    def __init__(self, message, time_index=None, modality=None):
        context = []
        if time_index is not None:
            context.append(f"step {time_index}")
        if modality is not None:
            context.append(f"modality {modality!r}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.time_index = time_index
        self.modality = modality


class OracleRefusedError(FusionError):
    """The brute-force joint Gaussian would exceed its dimension cap."""


class MetricError(FusionError, ValueError):
    pass


class CalibrationError(FusionError, ValueError):
    pass


class ClassificationError(FusionError, ValueError):
    pass


class RasterIOError(FusionError, OSError):
    """Missing, truncated or malformed raster/manifest file."""
