"""Differentially private multi-stream CUSUM change detection."""

from .bounds import PrivacyParams, arl_lower_bound, asymptotic_threshold, h, wadd_upper_leading
from .engine import DetectorConfig, StopOutcome, SumCusum, init, run, step
from .errors import (
    ConvergenceError,
    DataError,
    DetectorStateError,
    DimensionError,
    DpcusumError,
    ModelError,
    NumericalError,
    PreconditionError,
    QuadratureError,
    SourceExhausted,
)
from .model import DiagGaussian, Gaussian, LaplaceLoc, StreamModel, global_sensitivity
from .noise import NoiseMode, NoiseSpec, RngHandle
from .scenario import NO_CHANGE, ChangeScenario

__version__ = "0.1.0"
