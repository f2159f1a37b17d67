"""Coupled ECG/PPG phase-oscillator simulator with fitting, latent flow and metrics."""

from .exceptions import (
    ConfigError,
    DomainError,
    EhsimError,
    FitDivergenceError,
    IntegrationBlowupError,
    ParseError,
    ShapeError,
    SingularFitError,
)
from .integrate import Waveform, simulate, simulate_window
from .simcore import SimParams, default_params, random_params

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "EhsimError",
    "FitDivergenceError",
    "IntegrationBlowupError",
    "ParseError",
    "ShapeError",
    "SingularFitError",
    "SimParams",
    "Waveform",
    "default_params",
    "random_params",
    "simulate",
    "simulate_window",
]
