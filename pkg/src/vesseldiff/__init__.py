"""Two-stage denoising diffusion for 3D vessel graphs."""

__version__ = "0.1.0"

from .graphs import (DatasetMeta, DatasetNormalization, NodeCountDistribution,
                     SpatialGraph, fit_normalization, load_dataset, load_graph,
                     save_dataset, save_graph, validate)
from .schedule import NoiseSchedule, make_cosine_schedule

__all__ = [
    "DatasetMeta", "DatasetNormalization", "NodeCountDistribution",
    "NoiseSchedule", "SpatialGraph", "fit_normalization", "load_dataset",
    "load_graph", "make_cosine_schedule", "save_dataset", "save_graph",
    "validate", "__version__",
]
