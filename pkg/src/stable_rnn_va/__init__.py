"""Control-conditioned GRU/LSTM audio models with a stability-enforcing
parametrization, plus training, synthetic data and noise measurement tools."""

from .cells import (
    GateMode,
    GruParams,
    GruState,
    LstmParams,
    LstmState,
    Model,
    ModelConfig,
    OutputLayer,
    autonomous_run,
    gru_step,
    lstm_step,
    model_step,
    run_sequence,
)
from .constraints import Parametrization, StabilityMargin, verify_model
from .numerics import SeededRng, power_iteration, spectral_norm
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "GateMode",
    "GruParams",
    "GruState",
    "LstmParams",
    "LstmState",
    "Model",
    "ModelConfig",
    "OutputLayer",
    "Parametrization",
    "SeededRng",
    "StabilityMargin",
    "TrainConfig",
    "autonomous_run",
    "gru_step",
    "lstm_step",
    "model_step",
    "power_iteration",
    "run_sequence",
    "spectral_norm",
    "train",
    "verify_model",
]
