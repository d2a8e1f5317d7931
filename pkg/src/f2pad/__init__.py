"""Pixel-level anomaly segmentation by decomposing an image into a
defect-free part and a sparse anomalous part, guided by a feature-space
anomaly score."""
from .config import F2PADConfig, RunConfig
from .kernels import IMPLEMENTATION
from .pipeline import Decomposition, F2PADResult, run

__version__ = "0.1.0"

__all__ = ["F2PADConfig", "RunConfig", "IMPLEMENTATION", "Decomposition", "F2PADResult", "run", "__version__"]
