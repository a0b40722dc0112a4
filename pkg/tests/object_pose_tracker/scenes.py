"""Small scenes and frames shared by the test modules."""

from typing import Optional

import numpy as np

from object_pose_tracker.config import TrackerConfig
from object_pose_tracker.features import KeypointSet
from object_pose_tracker.frame import Frame, Observation, ingest
from object_pose_tracker.geometry import Intrinsics, Pose, random_rotation
from object_pose_tracker.synthetic import (
    Box,
    LandmarkKeypointProvider,
    SyntheticScene,
    default_intrinsics,
    landmark_keypoints,
    manipulation_scene,
    orbit_scene,
    render,
)
from object_pose_tracker.tracker import Tracker, TrackerState

BOX = Box((0.10, 0.14, 0.18))


def plane_intrinsics(width: int = 40, height: int = 30, f: float = 100.0) -> Intrinsics:
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def plane_frame(
    width: int = 40,
    height: int = 30,
    depth: float = 1.0,
    frame_id: int = 0,
    mask: Optional[np.ndarray] = None,
    pose: Optional[Pose] = None,
) -> Frame:
    """Fronto-parallel plane at ``depth`` filling the whole image."""
    K = plane_intrinsics(width, height)
    depth_map = np.full((height, width), depth)
    if mask is None:
        mask = np.ones((height, width), dtype=bool)
    color = np.zeros((height, width, 3), dtype=np.uint8)
    return ingest(color, depth_map, mask, K, frame_id, pose)


def tiny_orbit(frames: int = 10, width: int = 160, height: int = 120, **kwargs):
    kwargs.setdefault("name", "TINY_ORBIT")
    return orbit_scene(BOX, default_intrinsics(width, height), frames=frames, **kwargs)


def static_scene(frames: int = 5, width: int = 160, height: int = 120, **kwargs):
    """Object and camera never move."""
    kwargs.setdefault("name", "STATIC")
    return manipulation_scene(
        BOX,
        default_intrinsics(width, height),
        frames=frames,
        step_deg=0.0,
        step_m=0.0,
        **kwargs,
    )


def observe(scene: SyntheticScene, t: int) -> tuple[Observation, np.ndarray]:
    rendered = render(scene, t)
    observation = Observation(t, rendered.color, rendered.depth, scene.intrinsics)
    return observation, rendered.mask


def scene_frame(scene: SyntheticScene, t: int) -> Frame:
    rendered = render(scene, t)
    return ingest(
        rendered.color,
        rendered.depth,
        rendered.mask,
        scene.intrinsics,
        t,
        rendered.gt_pose,
    )


def exact_landmark_keypoints(scene: SyntheticScene, t: int) -> tuple[KeypointSet, np.ndarray]:
    """Visible landmarks of frame ``t`` at their exact camera-frame positions."""
    kp = landmark_keypoints(scene, t)
    points, normals, descriptors = scene.landmarks
    gt = scene.trajectory[t]
    ids = kp.landmark_ids
    keypoints = KeypointSet(
        pixels=kp.pixels,
        points=gt.apply(points[ids]),
        normals=normals[ids] @ gt.rotation.T,
        descriptors=descriptors[ids],
    )
    return keypoints, ids


def random_pose(
    rng: np.random.Generator, max_angle: float = np.pi, max_translation: float = 1.0
) -> Pose:
    return Pose(
        random_rotation(rng, max_angle),
        rng.uniform(-max_translation, max_translation, size=3),
    )


class SceneMaskProvider:
    """Exact rendered masks of a synthetic scene."""

    def __init__(self, scene: SyntheticScene):
        self.scene = scene

    def get_mask(self, frame_id: int, depth: np.ndarray, K: Intrinsics) -> np.ndarray:
        return render(self.scene, frame_id).mask


def track_scene(
    scene: SyntheticScene,
    config: Optional[TrackerConfig] = None,
    frames: Optional[int] = None,
    threads: int = 1,
) -> TrackerState:
    """Run a tracker over the first ``frames`` frames of ``scene`` from its initial pose."""
    n = len(scene) if frames is None else frames
    observations = (observe(scene, t)[0] for t in range(n))
    with Tracker(
        config,
        keypoint_provider=LandmarkKeypointProvider(scene),
        mask_provider=SceneMaskProvider(scene),
        threads=threads,
    ) as tracker:
        tracker.track(observations, scene.initial_pose)
    return tracker.state
