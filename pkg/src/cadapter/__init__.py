"""Conformal prediction with an order-preserving logit adapter.

The adapter refines classifier logits without changing their ranking and is
tuned with a pairwise surrogate loss so that prediction sets shrink across
error rates.
"""

from cadapter.adapter import AdapterParams, load_params, save_params
from cadapter.conformal import CalibrationResult, calibrate, predict_sets
from cadapter.data import LogitDataset, SplitSpec, SynthConfig, load_logits, save_logits, split, synthesize
from cadapter.errors import NumericError, ParseError, UnsupportedError, ValidationError
from cadapter.metrics import MetricsReport, evaluate
from cadapter.scores import ScoreSpec, softmax
from cadapter.train import TrainConfig, TrainTrace, tune

__version__ = "0.1.0"

__all__ = [
    "AdapterParams",
    "CalibrationResult",
    "LogitDataset",
    "MetricsReport",
    "NumericError",
    "ParseError",
    "ScoreSpec",
    "SplitSpec",
    "SynthConfig",
    "TrainConfig",
    "TrainTrace",
    "UnsupportedError",
    "ValidationError",
    "calibrate",
    "evaluate",
    "load_logits",
    "load_params",
    "predict_sets",
    "save_logits",
    "save_params",
    "softmax",
    "split",
    "synthesize",
    "tune",
]
