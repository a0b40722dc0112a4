import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from object_pose_tracker.config import HuberConfig, SolverConfig
from object_pose_tracker.frame import Frame
from object_pose_tracker.geometry import Pose, Twist, exp_map, log_map

if TYPE_CHECKING:
    from object_pose_tracker.pose_graph.edges import DenseEdge, FeatureEdge


@dataclass(frozen=True)
class HuberParams:
    delta_feature: float = 0.005
    delta_geometric: float = 0.005

    def __post_init__(self):
        if self.delta_feature <= 0 or self.delta_geometric <= 0:
            raise ValueError("Huber thresholds must be positive")

    @classmethod
    def from_config(cls, config: HuberConfig) -> "HuberParams":
        return cls(config.delta_feature, config.delta_geometric)


@dataclass(frozen=True)
class DenseGates:
    """Outlier filters of the reprojection association."""

    distance: float = 0.02
    angle: float = math.radians(45.0)
    stride: int = 1

    @classmethod
    def from_config(cls, config: SolverConfig) -> "DenseGates":
        return cls(
            config.dense_distance_gate, config.dense_angle_gate, config.dense_stride
        )


@dataclass(eq=False)
class GraphNode:
    frame: Frame
    twist: Twist
    fixed: bool = False

    @property
    def pose(self) -> Pose:
        return exp_map(self.twist)


@dataclass(eq=False)
class PoseGraph:
    """Nodes with their twist states plus feature and dense edges.

    Feature edges are keyed by node index pairs ``(a, b)`` with ``a < b``; each
    stands for both orientations in the energy. Dense edges are directed:
    ``(i, j)`` holds pixels of node ``i`` associated into node ``j``.
    """

    nodes: list[GraphNode]
    lambda1: float = 1.0
    lambda2: float = 1.0
    huber: HuberParams = field(default_factory=HuberParams)
    gates: DenseGates = field(default_factory=DenseGates)
    feature_edges: dict[tuple[int, int], "FeatureEdge"] = field(default_factory=dict)
    dense_edges: dict[tuple[int, int], "DenseEdge"] = field(default_factory=dict)

    @classmethod
    def from_frames(
        cls,
        frames: list[Frame],
        poses: list[Pose],
        fixed_id: int,
        **kwargs,
    ) -> "PoseGraph":
        """One node per frame; only the node whose frame id is ``fixed_id`` is fixed."""
        nodes = [
            GraphNode(frame, log_map(pose), fixed=frame.id == fixed_id)
            for frame, pose in zip(frames, poses)
        ]
        return cls(nodes=nodes, **kwargs)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def fixed_mask(self) -> list[bool]:
        return [node.fixed for node in self.nodes]

    @property
    def free_indices(self) -> list[int]:
        return [k for k, node in enumerate(self.nodes) if not node.fixed]

    def poses(self) -> list[Pose]:
        return [node.pose for node in self.nodes]

    def twists(self) -> list[Twist]:
        return [node.twist for node in self.nodes]

    def set_twists(self, twists: list[Twist]) -> None:
        for node, twist in zip(self.nodes, twists):
            if not node.fixed:
                node.twist = twist

    def pairs(self) -> list[tuple[int, int]]:
        n = len(self.nodes)
        return [(a, b) for a in range(n) for b in range(a + 1, n)]

    def ordered_pairs(self) -> list[tuple[int, int]]:
        n = len(self.nodes)
        return [(i, j) for i in range(n) for j in range(n) if i != j]
