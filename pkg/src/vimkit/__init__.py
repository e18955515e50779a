"""Vision Mamba image classification on a small numpy autodiff engine."""

from .vim_model import VimConfig, VimModel, forward, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["VimConfig", "VimModel", "forward", "load_checkpoint", "save_checkpoint"]
