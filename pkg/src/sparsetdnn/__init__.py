"""TDNN speaker embeddings with group-Lasso structured sparsity and a chunk-packed sparse kernel."""

from .eval import ScoreSet, Trial, eer, min_dcf
from .model import ModelParams, Topology, embed, init_params
from .packed import PackedModel, QuantScheme, quantize, sparse_infer
from .sparsity import CHUNK8, CHUNK16, FILTER, Granularity, SparsityMask, build_groups, count_nonzero_params

__version__ = "0.1.0"

__all__ = [
    "CHUNK8", "CHUNK16", "FILTER", "Granularity", "ModelParams", "PackedModel", "QuantScheme",
    "ScoreSet", "SparsityMask", "Topology", "Trial", "build_groups", "count_nonzero_params",
    "eer", "embed", "init_params", "min_dcf", "quantize", "sparse_infer",
]
