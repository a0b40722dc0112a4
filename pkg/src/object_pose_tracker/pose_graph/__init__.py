from object_pose_tracker.pose_graph.edges import (
    CorrespondenceCache,
    DenseEdge,
    FeatureEdge,
    build_dense_edge,
    build_dense_edges,
    build_feature_edges,
)
from object_pose_tracker.pose_graph.energy import (
    energy_feature,
    energy_geometric,
    huber,
    linearize,
    residuals_feature,
    residuals_geometric,
    total_energy,
)
from object_pose_tracker.pose_graph.graph import (
    DenseGates,
    GraphNode,
    HuberParams,
    PoseGraph,
)
from object_pose_tracker.pose_graph.solver import optimize, pcg_solve

__all__ = [
    "CorrespondenceCache",
    "DenseEdge",
    "DenseGates",
    "FeatureEdge",
    "GraphNode",
    "HuberParams",
    "PoseGraph",
    "build_dense_edge",
    "build_dense_edges",
    "build_feature_edges",
    "energy_feature",
    "energy_geometric",
    "huber",
    "linearize",
    "optimize",
    "pcg_solve",
    "residuals_feature",
    "residuals_geometric",
    "total_energy",
]
