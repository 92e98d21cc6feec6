"""Two-stage adaptive vision transformer: a low-resolution early-exit pass,
then cluster-local attention over high-resolution target tokens and reused
background tokens. Pure numpy, with exact MAC accounting."""

from .model import DEIT_S, TINY, TOY, ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .pipeline import infer

__version__ = "0.1.0"

__all__ = [
    "DEIT_S", "TINY", "TOY", "ModelConfig", "ModelParams", "infer", "init_params", "load_checkpoint",
    "save_checkpoint",
]
