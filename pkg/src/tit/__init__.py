"""Task-conditional multi-task dense prediction on a small numpy autodiff engine."""
from .tensor import Tensor, backward, grad_check
from .model import ModelConfig, TaskSpec, TITModel, nyud_tasks

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad_check", "ModelConfig", "TaskSpec", "TITModel",
           "nyud_tasks"]
