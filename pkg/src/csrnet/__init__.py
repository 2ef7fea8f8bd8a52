"""Dilated-convolution crowd counting (CSRNet) in plain numpy."""
from .gtgen import Fixed, GeometryAdaptive, generate_density_map
from .model import build_config, forward, init_weights, param_count
from .tensor import ConvSpec, ConvWeights, conv2d_forward

__version__ = "0.1.0"
