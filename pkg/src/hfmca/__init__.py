"""Hierarchical functional maximal correlation at desk scale.

Log-determinant dependence training over convolutional feature hierarchies,
post-training eigenspectrum extraction, telescoping density-ratio response
maps, and an exact discrete-distribution reference for verifying all of it.
"""

from . import autodiff, costs, data, linalg, network, oracle, spectrum, telescope, training
from .autodiff import Tensor, no_grad
from .costs import (
    AcfFilterBank,
    CorrStats,
    filter_update,
    logdet_cost,
    stats_external,
    stats_internal,
    stats_pairwise,
    surrogate_cost,
)
from .data import AugmentProtocol, LabeledDataset, ViewGroup, generate_synthetic, sample_views
from .network import NetworkSpec, build_network, desk_network_spec, geometry, window_map
from .oracle import JointTable, chain_joint, exact_decompose, telescoping_check
from .spectrum import SpectrumResult, compare_bases, density_ratio, extract_spectrum, optimal_cost
from .telescope import ResponseMap, local_ratio_field, propagate
from .training import (
    Trainer,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    embed_images,
    load_network,
)

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "costs",
    "data",
    "linalg",
    "network",
    "oracle",
    "spectrum",
    "telescope",
    "training",
    "Tensor",
    "no_grad",
    "AcfFilterBank",
    "CorrStats",
    "filter_update",
    "logdet_cost",
    "stats_external",
    "stats_internal",
    "stats_pairwise",
    "surrogate_cost",
    "AugmentProtocol",
    "LabeledDataset",
    "ViewGroup",
    "generate_synthetic",
    "sample_views",
    "NetworkSpec",
    "build_network",
    "desk_network_spec",
    "geometry",
    "window_map",
    "JointTable",
    "chain_joint",
    "exact_decompose",
    "telescoping_check",
    "SpectrumResult",
    "compare_bases",
    "density_ratio",
    "extract_spectrum",
    "optimal_cost",
    "ResponseMap",
    "local_ratio_field",
    "propagate",
    "Trainer",
    "TrainConfig",
    "checkpoint_load",
    "checkpoint_save",
    "embed_images",
    "load_network",
    "__version__",
]
