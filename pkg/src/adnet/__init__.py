"""Three-branch CNN for dementia-stage classification, on a small numpy framework."""

from .graph import Graph, OpNode, ParamStore, backward, forward, infer_shapes, toposort
from .model import CLASS_NAMES, BranchSpec, ModelConfig, build_adnet, param_count, summarize

__all__ = [
    "CLASS_NAMES",
    "BranchSpec",
    "Graph",
    "ModelConfig",
    "OpNode",
    "ParamStore",
    "backward",
    "build_adnet",
    "forward",
    "infer_shapes",
    "param_count",
    "summarize",
    "toposort",
]

__version__ = "0.1.0"
