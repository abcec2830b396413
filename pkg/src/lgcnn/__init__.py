"""Local-global CNN toolkit for fault diagnosis on windowed time-series images.

The package bundles a small from-scratch deep-learning stack (tensors,
differentiable layers, a declarative model builder with parameter audits
and receptive-field reports), a training/evaluation engine, and a data
pipeline that turns multivariate process recordings into normalized 20x50
window images. The ``lgcnn`` command line wires it all together.
"""

from .tensor import Shape4, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "Shape4", "ShapeError", "__version__"]
