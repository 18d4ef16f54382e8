from .backend import BACKEND_NAME, get_kernels
from .lstm import GATES, LstmCellParams, lstm_sequence, lstm_step
from .ops import linear, mse
from .optim import OptimizerState, adam_update, clip_global_norm
from .tensor import Tensor, backward

__all__ = [
    "BACKEND_NAME",
    "GATES",
    "LstmCellParams",
    "OptimizerState",
    "Tensor",
    "adam_update",
    "backward",
    "clip_global_norm",
    "get_kernels",
    "linear",
    "mse",
    "lstm_sequence",
    "lstm_step",
]
