"""Tests for pose_graph.edges module."""

from concurrent.futures import ThreadPoolExecutor
from unittest.mock import patch

import numpy as np
import pytest

from object_pose_tracker.features import KeypointSet, MatchSet
from object_pose_tracker.geometry import Pose
from object_pose_tracker.pose_graph import (
    CorrespondenceCache,
    DenseGates,
    PoseGraph,
    build_dense_edge,
    build_feature_edges,
)
from object_pose_tracker.pose_graph import edges as edges_module
from object_pose_tracker.pose_graph.edges import pair_seed
from tests.object_pose_tracker.scenes import (
    exact_landmark_keypoints,
    plane_frame,
    scene_frame,
    tiny_orbit,
)


def _matches() -> MatchSet:
    return MatchSet(np.array([[0, 4], [1, 2], [3, 0]]), np.array([0.1, 0.2, 0.3]))


def _orbit_graph(n: int = 4):
    scene = tiny_orbit(frames=n)
    frames, ids = [], []
    for t in range(n):
        frame = scene_frame(scene, t)
        frame.keypoints, landmark_ids = exact_landmark_keypoints(scene, t)
        frames.append(frame)
        ids.append(landmark_ids)
    graph = PoseGraph.from_frames(frames, list(scene.trajectory), fixed_id=0)
    return graph, ids


class TestCorrespondenceCache:
    """Test the unordered-pair match cache."""

    def test_get_in_stored_orientation_returns_same_object(self):
        cache = CorrespondenceCache()
        matches = _matches()
        cache.put(1, 3, matches)
        assert cache.get(1, 3) is matches

    def test_reverse_lookup_is_swapped(self):
        cache = CorrespondenceCache()
        matches = _matches()
        cache.put(3, 1, matches)
        np.testing.assert_array_equal(cache.get(3, 1).pairs, matches.pairs)
        np.testing.assert_array_equal(cache.get(1, 3).pairs, matches.pairs[:, ::-1])
        np.testing.assert_array_equal(cache.get(1, 3).scores, matches.scores)

    def test_contains_and_len(self):
        cache = CorrespondenceCache()
        cache.put(2, 5, _matches())
        assert (2, 5) in cache and (5, 2) in cache
        assert (2, 6) not in cache
        assert len(cache) == 1
        assert cache.get(6, 2) is None

    def test_retain_drops_pairs_outside_the_ids(self):
        cache = CorrespondenceCache()
        for a, b in [(0, 1), (0, 4), (1, 4), (4, 7)]:
            cache.put(a, b, _matches())
        assert cache.retain([0, 4, 9]) == 3
        assert list(cache) == [(0, 4)]
        assert cache.get(4, 0) is not None


class TestPairSeed:
    def test_symmetric(self):
        assert pair_seed(7, 3, 9) == pair_seed(7, 9, 3)

    def test_depends_on_pair_and_seed(self):
        assert pair_seed(7, 3, 9) != pair_seed(7, 3, 10)
        assert pair_seed(7, 3, 9) != pair_seed(8, 3, 9)


class TestBuildFeatureEdges:
    """Test feature edge construction over all node pairs."""

    def test_exact_landmarks_match_by_identity(self):
        """Every inlier links the same landmark and every shared one is found."""
        graph, ids = _orbit_graph()
        edges = build_feature_edges(graph, CorrespondenceCache())
        assert set(edges) == set(graph.pairs())
        for (a, b), edge in edges.items():
            pairs = edge.matches.pairs
            np.testing.assert_array_equal(ids[a][pairs[:, 0]], ids[b][pairs[:, 1]])
            assert len(edge) == len(np.intersect1d(ids[a], ids[b]))
            assert len(edge) > 0

    def test_edge_points_are_the_matched_keypoints(self):
        graph, _ = _orbit_graph(2)
        edge = build_feature_edges(graph, CorrespondenceCache())[(0, 1)]
        kp_a = graph.nodes[0].frame.keypoints
        kp_b = graph.nodes[1].frame.keypoints
        np.testing.assert_array_equal(edge.points_a, kp_a.points[edge.matches.pairs[:, 0]])
        np.testing.assert_array_equal(edge.points_b, kp_b.points[edge.matches.pairs[:, 1]])

    def test_cached_pairs_are_not_registered_again(self):
        graph, _ = _orbit_graph(3)
        cache = CorrespondenceCache()
        first = build_feature_edges(graph, cache)
        assert len(cache) == 3

        with patch.object(edges_module, "register_pair") as register:
            second = build_feature_edges(graph, cache)
        register.assert_not_called()
        for pair in graph.pairs():
            assert second[pair].matches is first[pair].matches

    def test_parallel_build_matches_serial(self):
        graph, _ = _orbit_graph()
        serial = build_feature_edges(graph, CorrespondenceCache(), seed=3)
        with ThreadPoolExecutor(max_workers=3) as executor:
            parallel = build_feature_edges(
                graph, CorrespondenceCache(), seed=3, executor=executor
            )
        for pair in graph.pairs():
            np.testing.assert_array_equal(
                serial[pair].matches.pairs, parallel[pair].matches.pairs
            )

    def test_frame_without_keypoints_gives_empty_edges(self):
        graph, _ = _orbit_graph(3)
        graph.nodes[2].frame.keypoints = KeypointSet.empty()
        edges = build_feature_edges(graph, CorrespondenceCache())
        assert len(edges[(0, 2)]) == 0
        assert len(edges[(1, 2)]) == 0
        assert len(edges[(0, 1)]) > 0

    def test_missing_keypoints_rejected(self):
        graph, _ = _orbit_graph(2)
        graph.nodes[1].frame.keypoints = None
        with pytest.raises(ValueError, match="no keypoints"):
            build_feature_edges(graph, CorrespondenceCache())


class TestBuildDenseEdge:
    """Test reprojection association between two frames."""

    def test_identical_frames_associate_every_sample(self):
        frame = plane_frame()
        edge = build_dense_edge(frame, frame, Pose.identity(), Pose.identity())
        assert len(edge) == 38 * 28
        np.testing.assert_array_equal(edge.points, edge.matched)

    def test_small_offset_within_gate(self):
        offset = Pose(np.eye(3), [0.0, 0.0, 0.001])
        edge = build_dense_edge(plane_frame(), plane_frame(), Pose.identity(), offset)
        assert len(edge) >= 0.9 * 38 * 28
        np.testing.assert_allclose(edge.matched[:, 2], 1.0)

    def test_large_offset_fails_distance_gate(self):
        offset = Pose(np.eye(3), [0.0, 0.0, 0.05])
        edge = build_dense_edge(plane_frame(), plane_frame(), Pose.identity(), offset)
        assert len(edge) == 0
        assert edge.points.shape == (0, 3)

    def test_pixels_leaving_the_image_are_dropped(self):
        """A 10 cm slide shifts the view by 10 px at f = 100 and depth 1 m."""
        offset = Pose(np.eye(3), [0.1, 0.0, 0.0])
        edge = build_dense_edge(plane_frame(), plane_frame(), Pose.identity(), offset)
        assert len(edge) == 28 * 28
        back = edge.matched - np.array([0.1, 0.0, 0.0])
        np.testing.assert_allclose(back, edge.points, atol=1e-12)

    def test_stride(self):
        frame = plane_frame()
        edge = build_dense_edge(
            frame, frame, Pose.identity(), Pose.identity(), DenseGates(stride=2)
        )
        assert len(edge) == 19 * 14

    def test_empty_mask(self):
        empty = plane_frame(mask=np.zeros((30, 40), dtype=bool))
        edge = build_dense_edge(
            empty, plane_frame(), Pose.identity(), Pose.identity(), i=2, j=5
        )
        assert len(edge) == 0
        assert (edge.i, edge.j) == (2, 5)
