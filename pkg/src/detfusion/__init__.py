"""detfusion: set-prediction detection, calibrated region extraction, and
crossmodal question answering on a minimal float64 autodiff core."""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
