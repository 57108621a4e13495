"""Frequency-aware, semantically guided U-Net for infrared small-target
segmentation, built on a small numpy autodiff core."""
from .kernels import BACKEND
from .network import FsgnetConfig, build_network, count_params_flops, load_checkpoint, save_checkpoint
from .tensor import PadQuad, Tape, Tensor, backward, precision, set_precision

__version__ = "0.1.0"
