"""Point-cloud transformer with multi-level, multi-scale attention, on a small numpy autodiff engine."""
from .model import ABLATIONS, ModelConfig, ParameterStore, forward_full, init_params
from .pointcloud import PointCloud
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = ["ABLATIONS", "ModelConfig", "ParameterStore", "PointCloud", "Tensor", "backward", "forward_full",
           "init_params"]
