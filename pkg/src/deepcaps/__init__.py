"""DeepCaps: deep convolutional capsule networks on a small numpy autodiff engine."""

from deepcaps.autodiff import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "__version__"]
