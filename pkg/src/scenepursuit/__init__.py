"""Scene parsing by sequential information-guided query selection."""

from .scenegen import (
    AttributedGraph,
    BranchingParams,
    Category,
    MasterGraph,
    ObjectPose,
    SceneLayout,
    TableGeometry,
    default_branching_params,
    default_master_graph,
    flatten_to_layout,
    graph_log_prob,
    mcem_fit,
    sample_scene,
)

__all__ = [
    "AttributedGraph",
    "BranchingParams",
    "Category",
    "MasterGraph",
    "ObjectPose",
    "SceneLayout",
    "TableGeometry",
    "default_branching_params",
    "default_master_graph",
    "flatten_to_layout",
    "graph_log_prob",
    "mcem_fit",
    "sample_scene",
]
