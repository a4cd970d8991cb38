"""Blind OFDM sensing and demodulation from fourth-order statistics."""

__version__ = "0.1.0"

from .core import (Constellation, OfdmConfig, SourceParams, compute_metrics, load_constellation,
                   qpsk, save_constellation, slice_points)
from .waveform import (ImpairmentConfig, ReceivedTensor, Scenario, load_scenario, load_tensor,
                       save_tensor, synthesize)
from .hos import DetectedSource, EstimateReport, EstimatorConfig, detect_all, hos_periodogram
from .separation import FitConfig, demodulate, fit_stream, resolve_permutation, zf_separate
from .design import ApskGeometry, DesignWeights, optimize, preset_constellation, realize
from .bounds import crlb_data_aided, crlb_stochastic, data_aided_estimate, pilot_aided_estimate

__all__ = [
    "ApskGeometry", "Constellation", "DesignWeights", "DetectedSource", "EstimateReport",
    "EstimatorConfig", "FitConfig", "ImpairmentConfig", "OfdmConfig", "ReceivedTensor",
    "Scenario", "SourceParams", "compute_metrics", "crlb_data_aided", "crlb_stochastic",
    "data_aided_estimate", "demodulate", "detect_all", "fit_stream", "hos_periodogram",
    "load_constellation", "load_scenario", "load_tensor", "optimize", "pilot_aided_estimate",
    "preset_constellation", "qpsk", "realize", "resolve_permutation", "save_constellation",
    "save_tensor", "slice_points", "synthesize", "zf_separate",
]
