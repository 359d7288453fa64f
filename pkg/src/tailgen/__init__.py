"""Exact-density modelling of normal data, tail-sample generation and anomaly scoring."""
from .errors import (ConfigError, FormatError, InputError, ModeCollapseError, NumericError,
                     TailgenError, TrainingAborted)
from .flow import FlowModel, fit_mle, forward, inverse, log_density, sample
from .tail import LossWeights, TailNet, generate_boundary, init_tail, loss_terms, train_tail

__version__ = "0.1.0"
