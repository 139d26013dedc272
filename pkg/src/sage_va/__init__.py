"""Reliability-guided multimodal fusion for continuous valence/arousal regression, on a numpy autodiff core."""

from .model import Checkpoint, ModelConfig, init_params, load_checkpoint, sage_forward, save_checkpoint
from .metrics import ccc, ccc_loss, evaluate

__all__ = ["Checkpoint", "ModelConfig", "ccc", "ccc_loss", "evaluate", "init_params",
           "load_checkpoint", "sage_forward", "save_checkpoint"]
__version__ = "0.1.0"
