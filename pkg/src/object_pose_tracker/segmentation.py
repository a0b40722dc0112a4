"""Object mask providers.

Masks come either from per-frame files (any external segmenter's output) or
from tabletop plane removal followed by Euclidean clustering.
"""

import logging
import math
from pathlib import Path
from typing import Optional, Protocol, Union

import cv2
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from object_pose_tracker.config import SegmentationConfig
from object_pose_tracker.errors import EmptyMaskError, ProviderError
from object_pose_tracker.geometry import Intrinsics, unproject_depth

logger = logging.getLogger(__name__)

MASK_PATTERN = "mask_{:06d}.png"
MIN_VALID_POINTS = 100
PLANE_SCORE_SAMPLES = 5000
MAX_CLUSTER_SAMPLES = 20000


class MaskProvider(Protocol):
    def get_mask(
        self, frame_id: int, depth: np.ndarray, intrinsics: Intrinsics
    ) -> np.ndarray: ...


def mask_from_file(path: Union[str, Path], frame_dims: tuple[int, int]) -> np.ndarray:
    """Binary mask from an 8-bit grayscale image; nonzero is object."""
    path = Path(path)
    if not path.exists():
        raise ProviderError(f"Mask file not found: {path}")
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise ProviderError(f"Mask file is not a readable image: {path}")
    if image.ndim == 3:
        image = image.max(axis=2)
    if image.shape != tuple(frame_dims):
        raise ProviderError(
            f"Mask {path} is {image.shape[1]}x{image.shape[0]}, "
            f"frame is {frame_dims[1]}x{frame_dims[0]}"
        )
    return image != 0


def write_mask(path: Union[str, Path], mask: np.ndarray) -> None:
    image = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    if not cv2.imwrite(str(path), image):
        raise ProviderError(f"Could not write mask file {path}")


def fit_plane_ransac(
    points: np.ndarray, inlier: float, iterations: int, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    """Dominant plane ``n . p + d = 0`` with unit ``n``.

    Hypotheses are scored on a fixed random subset; the winner is refit by
    least squares on its inliers over all points.
    """
    n_points = len(points)
    score_idx = rng.choice(
        n_points, size=min(n_points, PLANE_SCORE_SAMPLES), replace=False
    )
    score_idx.sort()
    scoring = points[score_idx]

    samples = np.stack(
        [rng.choice(n_points, size=3, replace=False) for _ in range(iterations)]
    )
    a, b, c = points[samples[:, 0]], points[samples[:, 1]], points[samples[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    usable = norms > 1e-12
    if not usable.any():
        raise EmptyMaskError("Depth points are degenerate; no plane can be fitted")
    normals = normals[usable] / norms[usable, None]
    offsets = -np.einsum("ij,ij->i", normals, a[usable])

    distances = np.abs(scoring @ normals.T + offsets)
    counts = (distances <= inlier).sum(axis=0)
    best = int(np.argmax(counts))
    normal, offset = normals[best], offsets[best]

    inliers = np.abs(points @ normal + offset) <= inlier
    if inliers.sum() >= 3:
        centroid = points[inliers].mean(axis=0)
        _, _, Vt = np.linalg.svd(points[inliers] - centroid, full_matrices=False)
        normal = Vt[2]
        offset = -float(normal @ centroid)
    return normal, float(offset)


def euclidean_clusters(points: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage cluster labels for (n, 3) points at linkage ``radius``."""
    if len(points) == 0:
        return np.zeros(0, dtype=int)
    tree = cKDTree(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    graph = coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
        shape=(len(points), len(points)),
    )
    _, labels = connected_components(graph, directed=False)
    return labels


def plane_removal_mask(
    depth: np.ndarray,
    intrinsics: Intrinsics,
    config: Optional[SegmentationConfig] = None,
    seed: int = 0,
) -> np.ndarray:
    """Mask of the largest off-plane cluster after removing the dominant plane."""
    config = config or SegmentationConfig()
    depth = np.asarray(depth, dtype=float)
    rows, cols = np.nonzero(depth > 0)
    if len(rows) < MIN_VALID_POINTS:
        raise EmptyMaskError(
            f"Only {len(rows)} valid depth points; need {MIN_VALID_POINTS}"
        )
    cloud = unproject_depth(depth, intrinsics)
    points = cloud[rows, cols]

    rng = np.random.default_rng(seed)
    normal, offset = fit_plane_ransac(
        points, config.plane_inlier, config.plane_iterations, rng
    )
    off_plane = np.abs(points @ normal + offset) > config.plane_inlier
    rows, cols, points = rows[off_plane], cols[off_plane], points[off_plane]
    if len(points) < config.min_cluster_size:
        raise EmptyMaskError("No object cluster found off the fitted plane")

    # cluster a pixel-grid subsample, then attach every pixel to its nearest
    # sample within the linkage radius
    step = max(1, math.ceil(math.sqrt(len(points) / MAX_CLUSTER_SAMPLES)))
    on_grid = (rows % step == 0) & (cols % step == 0)
    while on_grid.sum() > MAX_CLUSTER_SAMPLES:
        step += 1
        on_grid = (rows % step == 0) & (cols % step == 0)
    sample = points[on_grid]
    sample_labels = euclidean_clusters(sample, config.cluster_radius)

    if step == 1:
        labels = sample_labels
    else:
        distances, nearest = cKDTree(sample).query(
            points, distance_upper_bound=config.cluster_radius
        )
        attached = np.isfinite(distances)
        labels = np.full(len(points), -1)
        labels[attached] = sample_labels[nearest[attached]]

    sizes = np.bincount(labels[labels >= 0])
    if len(sizes) == 0 or sizes.max() < config.min_cluster_size:
        raise EmptyMaskError(
            f"No off-plane cluster with at least {config.min_cluster_size} points"
        )
    winner = int(np.argmax(sizes))
    logger.debug(
        "plane removal: %d off-plane points, %d clusters, largest %d",
        len(points),
        len(sizes),
        int(sizes[winner]),
    )
    mask = np.zeros(depth.shape, dtype=bool)
    keep = labels == winner
    mask[rows[keep], cols[keep]] = True
    return mask


class FileMaskProvider:
    """Loads ``mask_%06d.png`` files from a dataset directory."""

    def __init__(self, directory: Union[str, Path], pattern: str = MASK_PATTERN):
        self.directory = Path(directory)
        self.pattern = pattern

    def get_mask(
        self, frame_id: int, depth: np.ndarray, intrinsics: Intrinsics
    ) -> np.ndarray:
        return mask_from_file(
            self.directory / self.pattern.format(frame_id), intrinsics.shape
        )


class PlaneRemovalMaskProvider:
    """Segments every frame by plane fitting and Euclidean clustering."""

    def __init__(self, config: Optional[SegmentationConfig] = None, seed: int = 0):
        self.config = config or SegmentationConfig()
        self.seed = seed

    def get_mask(
        self, frame_id: int, depth: np.ndarray, intrinsics: Intrinsics
    ) -> np.ndarray:
        return plane_removal_mask(depth, intrinsics, self.config, self.seed)
