"""Trainable clipping layers and ANN to SNN conversion on a small numpy graph engine."""

from .architectures import build_architecture
from .converter import NormFactorStrategy, convert, estimate_rate, normalize
from .fusion import fuse_batchnorm, fuse_model
from .modelfile import load_model, save_model
from .snn import SimConfig, evaluate_snn, if_step, simulate
from .tcl import Clip, clip_backward, clip_forward
from .tensor import ModelGraph
from .trainer import OptimizerConfig, evaluate, lambda_update, train

__version__ = "0.1.0"
