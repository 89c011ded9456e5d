"""Multiplication-free networks built from learnable lookup tables."""
from .cost import CostProfile, OpCostTable, count_ops, estimate, table_memory
from .layer import LookupConv2d, compute_indices, init_scales
from .models import NetworkSpec, build_network
from .reparam import ConversionError, ReparamNetwork, convert_network
from .table import LookupTable, build_feature_subtable, build_weight_subtable
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConversionError",
    "CostProfile",
    "LookupConv2d",
    "LookupTable",
    "NetworkSpec",
    "OpCostTable",
    "ReparamNetwork",
    "Tensor",
    "build_feature_subtable",
    "build_network",
    "build_weight_subtable",
    "compute_indices",
    "convert_network",
    "count_ops",
    "estimate",
    "init_scales",
    "no_grad",
    "table_memory",
]
