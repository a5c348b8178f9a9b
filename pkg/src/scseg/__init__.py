"""Self-calibrated 3D convolutions inside a U-shaped segmentation network.

A self-contained CPU engine: autograd tensors, volumetric NN primitives,
the self-calibrated convolution module and its placements in a 3D U-Net,
region-mapped Dice+BCE training, and Dice evaluation on synthetic
multi-modal phantoms.
"""

from scseg.tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
