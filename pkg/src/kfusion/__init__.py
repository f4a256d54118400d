"""Kalman filtering and RTS smoothing for multi-resolution image-sequence fusion."""

from .errors import (
    CalibrationError,
    ClassificationError,
    ConfigError,
    EstimationError,
    FusionError,
    MetricError,
    OracleRefusedError,
    RasterIOError,
)
from .observation import (
    ModalityObservation,
    ModalityOperator,
    QualitySelection,
    SpatialDegradation,
    SpectralMap,
    assemble_operator,
    build_identity,
    build_uniform_blur_decimate,
    gain_calibrate,
    selection_from_quality,
)
from .state_model import (
    DynamicalModel,
    FilterTrace,
    GaussianState,
    filter_sequence,
    fuse_step,
    joint_gaussian_oracle,
    predict,
    rts_smooth,
    stack_observations,
    update,
)

__version__ = "0.1.0"
