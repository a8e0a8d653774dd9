"""Explainable anomaly classification workbench.

Subpackages cover image primitives, a synthetic seam dataset, a small
trainable scorer, occlusion-based saliency, embedding-space neighbor
retrieval, the interactive correction loop, and a CLI / HTTP harness.
"""

__version__ = "0.1.0"

from . import imaging
from . import dataset
from . import classifier
from . import saliency
from . import metrics
from . import neighbors
from . import interaction

__all__ = [
    "imaging",
    "dataset",
    "classifier",
    "saliency",
    "metrics",
    "neighbors",
    "interaction",
]
