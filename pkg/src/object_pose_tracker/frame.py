"""RGB-D frame ingestion: masked point cloud and per-pixel normals."""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import cv2
import numpy as np

from object_pose_tracker.errors import IngestionError
from object_pose_tracker.geometry import Intrinsics, Pose, unproject_depth

if TYPE_CHECKING:
    from object_pose_tracker.features import KeypointSet

logger = logging.getLogger(__name__)

DEPTH_JUMP = 0.05


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(eq=False)
class Frame:
    """One RGB-D observation.

    Everything but ``pose`` and ``keypoints`` is read-only once ingested.
    ``valid`` marks pixels with positive depth inside the mask.
    """

    id: int
    color: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    intrinsics: Intrinsics
    cloud: np.ndarray
    normals: np.ndarray
    valid: np.ndarray
    normal_valid: np.ndarray
    keypoints: Optional["KeypointSet"] = None
    pose: Pose = field(default_factory=Pose.identity)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    def gray(self) -> np.ndarray:
        if self.color.ndim == 2:
            return self.color
        return cv2.cvtColor(self.color, cv2.COLOR_RGB2GRAY)


@dataclass(frozen=True, eq=False)
class Observation:
    """Raw RGB-D input of one time step; depth in meters."""

    id: int
    color: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics


@dataclass(frozen=True, eq=False)
class MaskedPoints:
    pixels: np.ndarray  # (n, 2) integer (u, v)
    points: np.ndarray
    normals: np.ndarray

    def __len__(self) -> int:
        return len(self.pixels)


def estimate_normals(
    depth: np.ndarray, K: Intrinsics, jump: float = DEPTH_JUMP
) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals from central-difference tangents of the unprojected cloud.

    Returns the (H, W, 3) normal map and its validity mask. Normals face the
    camera. Border pixels, pixels with an invalid neighbour and pixels across
    a depth jump larger than ``jump`` are invalid.
    """
    depth = np.asarray(depth, dtype=float)
    H, W = depth.shape
    normals = np.zeros((H, W, 3))
    valid = np.zeros((H, W), dtype=bool)
    if H < 3 or W < 3:
        return normals, valid

    cloud = unproject_depth(depth, K)
    du = cloud[1:-1, 2:] - cloud[1:-1, :-2]
    dv = cloud[2:, 1:-1] - cloud[:-2, 1:-1]
    n = np.cross(du, dv)

    center = depth[1:-1, 1:-1]
    neighbours = (
        depth[1:-1, 2:],
        depth[1:-1, :-2],
        depth[2:, 1:-1],
        depth[:-2, 1:-1],
    )
    ok = center > 0
    for d in neighbours:
        ok &= (d > 0) & (np.abs(d - center) <= jump)

    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 0
    n = n / np.where(ok, norm, 1.0)[..., None]
    facing = np.einsum("ijk,ijk->ij", n, cloud[1:-1, 1:-1])
    n[facing > 0] *= -1.0

    inner = normals[1:-1, 1:-1]
    inner[ok] = n[ok]
    valid[1:-1, 1:-1] = ok
    return normals, valid


def ingest(
    color: np.ndarray,
    depth: np.ndarray,
    mask: np.ndarray,
    intrinsics: Intrinsics,
    frame_id: int = 0,
    pose: Optional[Pose] = None,
) -> Frame:
    """Build a Frame from raw images; depth in meters with 0 as invalid."""
    depth = np.asarray(depth, dtype=float)
    mask = np.asarray(mask)
    color = np.asarray(color)
    expected = intrinsics.shape
    for name, image in (("depth", depth), ("mask", mask), ("color", color)):
        if image.shape[:2] != expected:
            raise IngestionError(
                f"{name} image is {image.shape[1]}x{image.shape[0]}, "
                f"intrinsics expect {expected[1]}x{expected[0]}"
            )

    depth = np.where(np.isfinite(depth) & (depth > 0), depth, 0.0)
    mask = mask.astype(bool)
    valid = mask & (depth > 0)

    cloud = unproject_depth(depth, intrinsics)
    cloud[~valid] = 0.0
    normals, normal_valid = estimate_normals(depth, intrinsics)

    logger.debug("frame %d: %d valid masked pixels", frame_id, int(valid.sum()))
    return Frame(
        id=frame_id,
        color=_readonly(color.copy()),
        depth=_readonly(depth),
        mask=_readonly(mask),
        intrinsics=intrinsics,
        cloud=_readonly(cloud),
        normals=_readonly(normals),
        valid=_readonly(valid),
        normal_valid=_readonly(normal_valid),
        pose=pose if pose is not None else Pose.identity(),
    )


def masked_points(frame: Frame, stride: int = 1) -> MaskedPoints:
    """Valid masked pixels with normals on a ``stride`` grid, row-major."""
    if stride < 1:
        raise ValueError("stride must be positive")
    usable = frame.valid & frame.normal_valid
    grid = np.zeros_like(usable)
    grid[::stride, ::stride] = True
    rows, cols = np.nonzero(usable & grid)
    pixels = np.stack([cols, rows], axis=1)
    return MaskedPoints(
        pixels=pixels,
        points=frame.cloud[rows, cols],
        normals=frame.normals[rows, cols],
    )
