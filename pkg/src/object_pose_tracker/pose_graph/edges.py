"""Feature and dense correspondences between pose-graph nodes."""

import logging
import math
from collections.abc import Collection, Iterable, Iterator
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from object_pose_tracker.config import RansacConfig
from object_pose_tracker.errors import RegistrationFailure
from object_pose_tracker.features import (
    KeypointSet,
    MatchSet,
    match_descriptors,
    ransac_register,
)
from object_pose_tracker.frame import Frame, MaskedPoints, masked_points
from object_pose_tracker.geometry import Pose, compose, inverse, project_points
from object_pose_tracker.pose_graph.graph import DenseGates, PoseGraph

logger = logging.getLogger(__name__)


def pair_seed(seed: int, id_a: int, id_b: int) -> int:
    """Per-pair RANSAC seed, independent of build order."""
    lo, hi = sorted((id_a, id_b))
    return int(np.random.SeedSequence([seed, lo, hi]).generate_state(1)[0])


class CorrespondenceCache:
    """Inlier matches per unordered frame-id pair, stored smaller id first."""

    def __init__(self):
        self._matches: dict[tuple[int, int], MatchSet] = {}

    def __len__(self) -> int:
        return len(self._matches)

    def __contains__(self, key: tuple[int, int]) -> bool:
        return tuple(sorted(key)) in self._matches

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(self._matches)

    def get(self, id_a: int, id_b: int) -> Optional[MatchSet]:
        """Matches oriented from ``id_a`` to ``id_b``, or None on a miss."""
        if id_a <= id_b:
            return self._matches.get((id_a, id_b))
        stored = self._matches.get((id_b, id_a))
        return None if stored is None else stored.swapped()

    def put(self, id_a: int, id_b: int, matches: MatchSet) -> None:
        if id_a <= id_b:
            self._matches[(id_a, id_b)] = matches
        else:
            self._matches[(id_b, id_a)] = matches.swapped()

    def retain(self, ids: Collection[int]) -> int:
        """Drop every pair with a frame outside ``ids``; returns the number dropped."""
        keep = set(ids)
        stale = [key for key in self._matches if not keep.issuperset(key)]
        for key in stale:
            del self._matches[key]
        return len(stale)


@dataclass(frozen=True, eq=False)
class FeatureEdge:
    """Matched keypoint positions of nodes ``a`` and ``b`` in their cameras."""

    a: int
    b: int
    matches: MatchSet
    points_a: np.ndarray
    points_b: np.ndarray

    def __len__(self) -> int:
        return len(self.matches)

    @classmethod
    def from_matches(
        cls, a: int, b: int, matches: MatchSet, ka: KeypointSet, kb: KeypointSet
    ) -> "FeatureEdge":
        return cls(
            a,
            b,
            matches,
            ka.points[matches.pairs[:, 0]],
            kb.points[matches.pairs[:, 1]],
        )


@dataclass(frozen=True, eq=False)
class DenseEdge:
    """Reprojection associations from node ``i`` into node ``j``.

    ``points`` and ``normals`` are pixels of frame i in camera i; ``matched``
    are the associated points of frame j in camera j.
    """

    i: int
    j: int
    points: np.ndarray
    normals: np.ndarray
    matched: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls, i: int, j: int) -> "DenseEdge":
        return cls(i, j, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))


def register_pair(
    ka: KeypointSet,
    kb: KeypointSet,
    ransac: RansacConfig,
    ratio: float,
    seed: int,
) -> MatchSet:
    """RANSAC inliers between two keypoint sets; empty when registration fails."""
    matches = match_descriptors(ka, kb, ratio)
    try:
        return ransac_register(
            matches,
            ka,
            kb,
            delta=ransac.delta,
            alpha=ransac.alpha,
            iterations=ransac.iterations,
            seed=seed,
            early_exit_ratio=ransac.early_exit_ratio,
        ).inliers
    except RegistrationFailure as e:
        logger.debug("pair registration failed: %s", e)
        return MatchSet.empty()


def _map(executor: Optional[Executor], fn, items: Iterable) -> list:
    if executor is None:
        return [fn(item) for item in items]
    return list(executor.map(fn, items))


def build_feature_edges(
    graph: PoseGraph,
    cache: CorrespondenceCache,
    ransac: Optional[RansacConfig] = None,
    ratio: float = 0.8,
    seed: int = 0,
    executor: Optional[Executor] = None,
) -> dict[tuple[int, int], FeatureEdge]:
    """Populate a feature edge for every node pair, reusing cached matches.

    Misses are registered in parallel and merged into the cache in pair
    order. Failed registrations become empty edges.
    """
    ransac = ransac or RansacConfig()
    frames = [node.frame for node in graph.nodes]
    for frame in frames:
        if frame.keypoints is None:
            raise ValueError(f"Frame {frame.id} has no keypoints")

    misses = [
        (a, b) for a, b in graph.pairs() if (frames[a].id, frames[b].id) not in cache
    ]

    def build(pair: tuple[int, int]) -> MatchSet:
        fa, fb = frames[pair[0]], frames[pair[1]]
        return register_pair(
            fa.keypoints, fb.keypoints, ransac, ratio, pair_seed(seed, fa.id, fb.id)
        )

    for (a, b), matches in zip(misses, _map(executor, build, misses)):
        cache.put(frames[a].id, frames[b].id, matches)
    logger.debug(
        "feature edges: %d pairs, %d built, %d cached",
        len(graph.pairs()),
        len(misses),
        len(graph.pairs()) - len(misses),
    )

    edges = {}
    for a, b in graph.pairs():
        matches = cache.get(frames[a].id, frames[b].id)
        assert matches is not None
        edges[(a, b)] = FeatureEdge.from_matches(
            a, b, matches, frames[a].keypoints, frames[b].keypoints
        )
    graph.feature_edges = edges
    return edges


def build_dense_edge(
    frame_i: Frame,
    frame_j: Frame,
    T_i: Pose,
    T_j: Pose,
    gates: Optional[DenseGates] = None,
    i: int = 0,
    j: int = 1,
    samples: Optional[MaskedPoints] = None,
) -> DenseEdge:
    """Associate masked pixels of frame i with frame j by reprojection.

    Each point goes camera i -> object -> camera j, takes the depth of the
    nearest pixel there, and comes back. Pairs failing the distance or
    normal-angle gate are dropped.
    """
    gates = gates or DenseGates()
    if samples is None:
        samples = masked_points(frame_i, gates.stride)
    if len(samples) == 0:
        return DenseEdge.empty(i, j)

    i_to_j = compose(T_j, inverse(T_i))
    j_to_i = inverse(i_to_j)
    pixels, in_front = project_points(i_to_j.apply(samples.points), frame_j.intrinsics)
    cols = np.rint(pixels[:, 0])
    rows = np.rint(pixels[:, 1])
    H, W = frame_j.shape
    inside = in_front & (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
    cols = np.where(inside, cols, 0).astype(int)
    rows = np.where(inside, rows, 0).astype(int)
    usable = inside & frame_j.valid[rows, cols] & frame_j.normal_valid[rows, cols]

    matched = frame_j.cloud[rows, cols]
    back = j_to_i.apply(matched)
    gap = np.linalg.norm(back - samples.points, axis=1)
    normals_j = frame_j.normals[rows, cols] @ j_to_i.rotation.T
    cos = np.einsum("ij,ij->i", normals_j, samples.normals)
    keep = usable & (gap <= gates.distance) & (cos >= math.cos(gates.angle))

    return DenseEdge(
        i,
        j,
        samples.points[keep],
        samples.normals[keep],
        matched[keep],
    )


def build_dense_edges(
    graph: PoseGraph,
    executor: Optional[Executor] = None,
    samples: Optional[list[MaskedPoints]] = None,
) -> dict[tuple[int, int], DenseEdge]:
    """Rebuild dense edges for every ordered node pair at the current poses."""
    poses = graph.poses()
    if samples is None:
        samples = [masked_points(n.frame, graph.gates.stride) for n in graph.nodes]

    def build(pair: tuple[int, int]) -> DenseEdge:
        i, j = pair
        return build_dense_edge(
            graph.nodes[i].frame,
            graph.nodes[j].frame,
            poses[i],
            poses[j],
            graph.gates,
            i,
            j,
            samples[i],
        )

    pairs = graph.ordered_pairs()
    graph.dense_edges = dict(zip(pairs, _map(executor, build, pairs)))
    return graph.dense_edges
