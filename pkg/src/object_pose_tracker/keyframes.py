"""Keyframe memory pool, greedy keyframe selection and pool augmentation."""

import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from object_pose_tracker.frame import Frame
from object_pose_tracker.geometry import Pose, rotation_geodesic

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class MemoryPool:
    """Keyframes in insertion order; entry 0 is the initial frame.

    Each keyframe carries its current pose estimate in ``Frame.pose``. The
    pool never shrinks.
    """

    keyframes: list[Frame] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keyframes)

    def __iter__(self) -> Iterator[Frame]:
        return iter(self.keyframes)

    def __getitem__(self, index: int) -> Frame:
        return self.keyframes[index]

    def __contains__(self, frame_id: object) -> bool:
        return any(kf.id == frame_id for kf in self.keyframes)

    @property
    def initial(self) -> Frame:
        return self.keyframes[0]

    @property
    def ids(self) -> list[int]:
        return [kf.id for kf in self.keyframes]

    def get(self, frame_id: int) -> Optional[Frame]:
        for kf in self.keyframes:
            if kf.id == frame_id:
                return kf
        return None

    def add(self, frame: Frame) -> None:
        if frame.id in self:
            raise ValueError(f"Frame {frame.id} is already a keyframe")
        self.keyframes.append(frame)

    def update_pose(self, frame_id: int, pose: Pose) -> None:
        keyframe = self.get(frame_id)
        if keyframe is None:
            raise KeyError(frame_id)
        keyframe.pose = pose


def selection_cost(
    rotations: Sequence[np.ndarray], current_rotation: np.ndarray
) -> float:
    """Sum of pairwise geodesic distances over the selection plus the current frame."""
    members = [*rotations, current_rotation]
    return sum(
        rotation_geodesic(members[a], members[b])
        for a in range(len(members))
        for b in range(a + 1, len(members))
    )


def select_keyframes(pool: MemoryPool, current_frame: Frame, K: int) -> list[Frame]:
    """Greedy minimum-H-subgraph selection of at most ``K`` keyframes.

    Starts from the initial frame and repeatedly adds the keyframe with the
    smallest summed rotation distance to the current frame and to everything
    selected so far. Ties go to the older frame. Only rotations matter.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if len(pool) == 0:
        raise ValueError("Keyframe pool is empty")
    if len(pool) <= K:
        return list(pool)

    current = current_frame.pose.rotation
    selected = [pool.initial]
    candidates = list(pool)[1:]
    # running cost: distance to the current frame, then each selected member
    cost = {
        kf.id: rotation_geodesic(kf.pose.rotation, current)
        + rotation_geodesic(kf.pose.rotation, pool.initial.pose.rotation)
        for kf in candidates
    }
    while len(selected) < K:
        best = min(candidates, key=lambda kf: (cost[kf.id], kf.id))
        selected.append(best)
        candidates.remove(best)
        for kf in candidates:
            cost[kf.id] += rotation_geodesic(kf.pose.rotation, best.pose.rotation)

    logger.debug("selected keyframes %s", [kf.id for kf in selected])
    return selected


def maybe_add_keyframe(
    pool: MemoryPool, frame: Frame, pose: Pose, threshold: float
) -> bool:
    """Add ``frame`` if its rotation is beyond ``threshold`` from every keyframe.

    An empty pool always accepts, which is how the initial frame enters.
    """
    if frame.id in pool:
        return False
    if len(pool) > 0:
        nearest = min(
            rotation_geodesic(kf.pose.rotation, pose.rotation) for kf in pool
        )
        if nearest <= threshold:
            return False
    frame.pose = pose
    pool.add(frame)
    logger.info("frame %d added to keyframe pool (size %d)", frame.id, len(pool))
    return True
