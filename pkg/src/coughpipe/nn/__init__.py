from .gradcheck import GradCheckReport, gradient_check
from .layers import ShapeError, softmax
from .network import (
    Checkpoint,
    LayerSpec,
    Network,
    NetworkSpec,
    backward,
    checksum,
    forward,
    layer,
)
from .optim import Adam, step

__all__ = [
    "Adam", "Checkpoint", "GradCheckReport", "LayerSpec", "Network", "NetworkSpec",
    "ShapeError", "backward", "checksum", "forward", "gradient_check", "layer", "softmax", "step",
]
