"""Self-distillation from the previous mini-batch with per-sample dynamic weighting."""

from .config import RunConfig
from .tensor import Tensor, no_grad
from .trainer import TrainMode, evaluate, run_experiment, train_step

__all__ = ["RunConfig", "Tensor", "TrainMode", "evaluate", "no_grad", "run_experiment",
           "train_step"]
__version__ = "0.1.0"
