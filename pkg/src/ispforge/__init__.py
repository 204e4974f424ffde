"""ispforge: a learned RAW-to-RGB ISP toolkit.

Tensor ops with a compiled convolution core, a graph IR with
serialization, structural re-parameterization, a synthetic RAW pipeline,
image metrics, a small reverse-mode trainer, challenge scoring, a model
zoo, and the ``ispforge`` command line.
"""

__version__ = "0.1.0"

from . import _backend
from .errors import (ChecksumError, FormatError, IspForgeError, NotDifferentiableError,
                     SchemaError, ShapeError)
from .graph import GraphBuilder, GraphModel, Node, execute, infer_shapes, run, validate
from .ops import ConvSpec
from .serialize import load, save

backend = _backend.name

__all__ = [
    "__version__", "backend",
    "IspForgeError", "ShapeError", "SchemaError", "FormatError", "ChecksumError", "NotDifferentiableError",
    "GraphModel", "GraphBuilder", "Node", "execute", "infer_shapes", "run", "validate",
    "ConvSpec", "load", "save",
]
