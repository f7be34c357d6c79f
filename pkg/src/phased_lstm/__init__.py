"""Phased LSTM: LSTM cells with a learned oscillating time gate.

Modules:

- ``diffmath``: arrays on a reverse-mode tape plus a finite-difference oracle
- ``cells``: LSTM step, time gate, Phased LSTM step
- ``scan``: the compiled whole-sequence recurrence used for training
- ``network``: one recurrent layer with a linear readout, serialization
- ``tasks``: frequency discrimination and adding-task generators
- ``training``: Adam, training loop, evaluation, update accounting
- ``verify``: gradient checks
- ``cli``: the ``phased-lstm`` command
"""

from .cells import gate_values, lstm_step, memory_decay_closed_form, phased_lstm_step, time_gate
from .diffmath import ContractError, DimensionError, EvaluationError, Tape, finite_difference_grad
from .network import Model, ModelConfig, forward_batch, forward_sequence, init_model, load_weights, save_weights
from .tasks import AddingTaskConfig, Dataset, EventSequence, FreqTaskConfig, gen_dataset
from .training import TrainConfig, TrainReport, count_update_ratio, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AddingTaskConfig",
    "ContractError",
    "Dataset",
    "DimensionError",
    "EvaluationError",
    "EventSequence",
    "FreqTaskConfig",
    "Model",
    "ModelConfig",
    "Tape",
    "TrainConfig",
    "TrainReport",
    "count_update_ratio",
    "evaluate",
    "finite_difference_grad",
    "forward_batch",
    "forward_sequence",
    "gate_values",
    "gen_dataset",
    "init_model",
    "load_weights",
    "lstm_step",
    "memory_decay_closed_form",
    "phased_lstm_step",
    "save_weights",
    "time_gate",
    "train",
]
