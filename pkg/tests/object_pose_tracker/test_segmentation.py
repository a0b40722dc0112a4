"""Tests for segmentation module."""

import cv2
import numpy as np
import pytest

from object_pose_tracker.config import SegmentationConfig
from object_pose_tracker.errors import EmptyMaskError, ProviderError
from object_pose_tracker.segmentation import (
    FileMaskProvider,
    PlaneRemovalMaskProvider,
    euclidean_clusters,
    mask_from_file,
    plane_removal_mask,
    write_mask,
)
from object_pose_tracker.synthetic import default_intrinsics, manipulation_scene, render
from tests.object_pose_tracker.scenes import BOX, plane_intrinsics


def _two_patch_depth() -> np.ndarray:
    """Background plane at 2 m with a 20x20 and a 10x10 patch at 1.5 m."""
    depth = np.full((80, 80), 2.0)
    depth[10:30, 10:30] = 1.5
    depth[55:65, 55:65] = 1.5
    return depth


class TestMaskFromFile:
    """Test mask file loading."""

    def test_all_white(self, tmp_path):
        path = tmp_path / "mask.png"
        cv2.imwrite(str(path), np.full((12, 16), 255, np.uint8))
        assert mask_from_file(path, (12, 16)).all()

    def test_all_black(self, tmp_path):
        path = tmp_path / "mask.png"
        cv2.imwrite(str(path), np.zeros((12, 16), np.uint8))
        assert not mask_from_file(path, (12, 16)).any()

    def test_round_trip(self, tmp_path):
        mask = np.zeros((12, 16), dtype=bool)
        mask[2:5, 3:9] = True
        write_mask(tmp_path / "mask.png", mask)
        assert np.array_equal(mask_from_file(tmp_path / "mask.png", (12, 16)), mask)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ProviderError, match="not found"):
            mask_from_file(tmp_path / "missing.png", (12, 16))

    def test_dimension_mismatch(self, tmp_path):
        path = tmp_path / "mask.png"
        cv2.imwrite(str(path), np.zeros((12, 16), np.uint8))
        with pytest.raises(ProviderError, match="16x12"):
            mask_from_file(path, (10, 16))

    def test_file_provider_uses_frame_pattern(self, tmp_path):
        mask = np.ones((30, 40), dtype=bool)
        write_mask(tmp_path / "mask_000007.png", mask)
        provider = FileMaskProvider(tmp_path)
        K = plane_intrinsics()
        assert provider.get_mask(7, np.ones((30, 40)), K).all()
        with pytest.raises(ProviderError):
            provider.get_mask(8, np.ones((30, 40)), K)


class TestPlaneRemoval:
    """Test tabletop plane removal and clustering."""

    def test_tabletop_box(self):
        """The box above a table is recovered with few false positives."""
        scene = manipulation_scene(
            BOX, default_intrinsics(160, 120), frames=1, name="TABLE", table_height=-0.2
        )
        rendered = render(scene, 0)
        mask = plane_removal_mask(rendered.depth, scene.intrinsics)
        truth = rendered.mask
        coverage = (mask & truth).sum() / truth.sum()
        false_positive = (mask & ~truth).sum() / mask.sum()
        assert coverage >= 0.95
        assert false_positive <= 0.05

    def test_pure_plane_is_empty(self):
        depth = np.full((40, 40), 1.0)
        with pytest.raises(EmptyMaskError):
            plane_removal_mask(depth, plane_intrinsics(40, 40))

    def test_too_few_points(self):
        depth = np.zeros((40, 40))
        depth[:5, :5] = 1.0
        with pytest.raises(EmptyMaskError, match="valid depth points"):
            plane_removal_mask(depth, plane_intrinsics(40, 40))

    def test_largest_cluster_wins(self):
        mask = plane_removal_mask(_two_patch_depth(), plane_intrinsics(80, 80))
        assert mask.sum() == 400
        assert mask[10:30, 10:30].all()
        assert not mask[55:65, 55:65].any()

    def test_deterministic_under_seed(self):
        depth = _two_patch_depth()
        K = plane_intrinsics(80, 80)
        a = plane_removal_mask(depth, K, seed=3)
        b = plane_removal_mask(depth, K, seed=3)
        assert np.array_equal(a, b)

    def test_min_cluster_size(self):
        config = SegmentationConfig(min_cluster_size=500)
        with pytest.raises(EmptyMaskError, match="500"):
            plane_removal_mask(_two_patch_depth(), plane_intrinsics(80, 80), config)

    def test_provider(self):
        provider = PlaneRemovalMaskProvider(seed=1)
        mask = provider.get_mask(0, _two_patch_depth(), plane_intrinsics(80, 80))
        assert mask.sum() == 400


class TestEuclideanClusters:
    """Test single-linkage clustering."""

    def test_two_groups(self):
        points = np.array([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [1.0, 0.0, 0.0]])
        labels = euclidean_clusters(points, 0.02)
        assert labels[0] == labels[1] != labels[2]

    def test_empty(self):
        assert len(euclidean_clusters(np.zeros((0, 3)), 0.02)) == 0
