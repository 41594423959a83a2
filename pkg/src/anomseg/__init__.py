"""Anomaly segmentation toolkit on a synthetic shape world.

Subpackages cover tensor I/O, scene generation, the toy pixel classifier,
information statistics, anomaly scoring, pixel- and segment-level
evaluation, unsupervised class discovery and a CLI tying the experiments
together.
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
