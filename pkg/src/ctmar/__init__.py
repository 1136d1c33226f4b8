"""ctmar: fan-beam CT simulation and metal-artifact reduction.

Physics-faithful fan-beam simulation with polychromatic metal corruption,
classical sinogram-inpainting baselines, and spectral-convolution networks
for joint sinogram/image restoration, all running on a from-scratch
reverse-mode autodiff engine over numpy.
"""

__version__ = "0.1.0"

from .tensor import ShapeError, Tensor, no_grad  # noqa: F401
