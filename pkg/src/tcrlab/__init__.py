"""tcrlab: desk-scale lab for multi-modal TCR-pMHC binding transformers.

Trains small encoder-decoder models over immune-receptor sequence
modalities, captures directional cross-attention, and scores explanations
with a binding-residue hit-rate metric.
"""

from .kernels import BACKEND, backend_name
from .tensor import ComputeTape, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "ComputeTape", "BACKEND", "backend_name", "__version__"]
