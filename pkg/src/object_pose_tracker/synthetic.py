"""Synthetic RGB-D sequences with exact ground truth.

Objects are analytic surfaces (box, sphere, cylinder) ray cast through a
pinhole camera, optionally standing over a textured table plane. Surface
landmarks with fixed descriptors stand in for a keypoint detector when exact
or controllably corrupted correspondences are needed.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Protocol

import numpy as np

from object_pose_tracker.errors import CorrespondenceShortfallWarning, RenderError
from object_pose_tracker.evaluation import ModelPoints
from object_pose_tracker.features import (
    DESCRIPTOR_SIZE,
    KeypointSet,
    MatchSet,
    keypoints_at_pixels,
)
from object_pose_tracker.frame import Frame
from object_pose_tracker.geometry import (
    Intrinsics,
    Pose,
    compose,
    inverse,
    project_points,
    random_rotation,
    so3_exp,
)

logger = logging.getLogger(__name__)

TEXTURE_CELL = 0.02
TEXTURE_OFFSET = 0.00731
TABLE_CELL = 0.05
VISIBILITY_TOL = 0.01
GRAZING_COS = 0.2
BENCHMARK_FRAMES = 100
STEP_DEG = 2.0


class Shape(Protocol):
    def intersect(
        self, origin: np.ndarray, directions: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]: ...

    def sample_surface(
        self, rng: np.random.Generator, n: int
    ) -> tuple[np.ndarray, np.ndarray]: ...

    @property
    def bbox_dims(self) -> np.ndarray: ...


def _safe(d: np.ndarray) -> np.ndarray:
    return np.where(np.abs(d) < 1e-12, np.copysign(1e-12, d), d)


@dataclass(frozen=True, eq=False)
class Box:
    dims: tuple[float, float, float]

    @property
    def bbox_dims(self) -> np.ndarray:
        return np.array(self.dims, dtype=float)

    def intersect(self, origin, directions):
        """Entry distance along each ray (inf on a miss) and the face normal."""
        half = self.bbox_dims / 2.0
        d = _safe(directions)
        t1 = (-half - origin) / d
        t2 = (half - origin) / d
        near = np.minimum(t1, t2)
        t_in = near.max(axis=1)
        t_out = np.maximum(t1, t2).min(axis=1)
        hit = (t_in <= t_out) & (t_in > 0)
        axis = near.argmax(axis=1)
        normals = np.zeros_like(directions)
        rows = np.arange(len(directions))
        normals[rows, axis] = -np.sign(d[rows, axis])
        return np.where(hit, t_in, np.inf), normals

    def sample_surface(self, rng, n):
        dx, dy, dz = self.dims
        areas = np.array([dy * dz, dy * dz, dx * dz, dx * dz, dx * dy, dx * dy])
        faces = rng.choice(6, size=n, p=areas / areas.sum())
        half = self.bbox_dims / 2.0
        points = rng.uniform(-half, half, size=(n, 3))
        normals = np.zeros((n, 3))
        axis, sign = faces // 2, np.where(faces % 2 == 0, 1.0, -1.0)
        rows = np.arange(n)
        points[rows, axis] = sign * half[axis]
        normals[rows, axis] = sign
        return points, normals


@dataclass(frozen=True, eq=False)
class Sphere:
    radius: float

    @property
    def bbox_dims(self) -> np.ndarray:
        return np.full(3, 2.0 * self.radius)

    def intersect(self, origin, directions):
        a = np.einsum("ij,ij->i", directions, directions)
        b = 2.0 * directions @ origin
        c = float(origin @ origin) - self.radius**2
        disc = b * b - 4.0 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        t = (-b - root) / (2.0 * a)
        hit = (disc >= 0) & (t > 0)
        points = origin + t[:, None] * directions
        return np.where(hit, t, np.inf), points / self.radius

    def sample_surface(self, rng, n):
        normals = rng.normal(size=(n, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return self.radius * normals, normals


@dataclass(frozen=True, eq=False)
class Cylinder:
    """Capped cylinder around the object z axis."""

    radius: float
    height: float

    @property
    def bbox_dims(self) -> np.ndarray:
        return np.array([2.0 * self.radius, 2.0 * self.radius, self.height])

    def intersect(self, origin, directions):
        half = self.height / 2.0
        dx, dy, dz = directions.T
        a = dx * dx + dy * dy
        b = 2.0 * (origin[0] * dx + origin[1] * dy)
        c = origin[0] ** 2 + origin[1] ** 2 - self.radius**2
        disc = b * b - 4.0 * a * c
        t_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * _safe(a))
        z_side = origin[2] + t_side * dz
        side = (disc >= 0) & (a > 1e-12) & (t_side > 0) & (np.abs(z_side) <= half)
        t_side = np.where(side, t_side, np.inf)

        cap_z = np.where(origin[2] > 0, half, -half)
        t_cap = (cap_z - origin[2]) / _safe(dz)
        xy = origin[:2] + t_cap[:, None] * directions[:, :2]
        cap = (t_cap > 0) & (np.einsum("ij,ij->i", xy, xy) <= self.radius**2)
        t_cap = np.where(cap, t_cap, np.inf)

        t = np.minimum(t_side, t_cap)
        points = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * directions
        normals = np.zeros_like(directions)
        on_side = t_side <= t_cap
        normals[on_side, :2] = points[on_side, :2] / self.radius
        normals[~on_side, 2] = np.sign(cap_z)
        return t, normals

    def sample_surface(self, rng, n):
        side_area = 2.0 * math.pi * self.radius * self.height
        cap_area = math.pi * self.radius**2
        on_side = rng.random(n) < side_area / (side_area + 2.0 * cap_area)
        theta = rng.uniform(0.0, 2.0 * math.pi, n)
        rho = self.radius * np.sqrt(rng.random(n))
        top = rng.random(n) < 0.5
        points = np.zeros((n, 3))
        normals = np.zeros((n, 3))
        radial = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        points[:, :2] = np.where(
            on_side[:, None], self.radius * radial, rho[:, None] * radial
        )
        cap_sign = np.where(top, 1.0, -1.0)
        points[:, 2] = np.where(
            on_side,
            rng.uniform(-self.height / 2.0, self.height / 2.0, n),
            cap_sign * self.height / 2.0,
        )
        normals[on_side, :2] = radial[on_side]
        normals[~on_side, 2] = cap_sign[~on_side]
        return points, normals


def texture(points: np.ndarray, cell: float = TEXTURE_CELL) -> np.ndarray:
    """Checkerboard with a hashed per-cell intensity; values in [0, 1]."""
    idx = np.floor((points + TEXTURE_OFFSET) / cell).astype(np.int64)
    h = (
        (idx[:, 0] * 73856093) ^ (idx[:, 1] * 19349663) ^ (idx[:, 2] * 83492791)
    ) & 0xFFFF
    value = h / 0xFFFF
    parity = (idx.sum(axis=1) % 2) == 0
    return np.where(parity, 0.05 + 0.4 * value, 0.55 + 0.4 * value)


@dataclass(frozen=True, eq=False)
class RenderedFrame:
    color: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    gt_pose: Pose


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    """A posed object seen by a moving or static camera.

    ``object_poses`` map object to world and ``camera_poses`` map world to
    camera; the ground-truth object pose is their composition. The table is
    the world plane ``z = table_height``.
    """

    name: str
    shape: Shape
    intrinsics: Intrinsics
    object_poses: tuple[Pose, ...]
    camera_poses: tuple[Pose, ...]
    table_height: Optional[float] = None
    depth_sigma: float = 0.0
    descriptor_sigma: float = 0.0
    outlier_frac: float = 0.0
    initial_offset: Pose = field(default_factory=Pose.identity)
    seed: int = 0
    n_landmarks: int = 3000
    n_keypoints: int = 500
    tint: tuple[float, float, float] = (1.0, 0.85, 0.6)

    def __post_init__(self):
        if len(self.object_poses) == 0:
            raise ValueError("Scene needs at least one frame")
        if len(self.object_poses) != len(self.camera_poses):
            raise ValueError("Object and camera trajectories differ in length")

    def __len__(self) -> int:
        return len(self.object_poses)

    @cached_property
    def trajectory(self) -> tuple[Pose, ...]:
        return tuple(
            compose(cam, obj) for cam, obj in zip(self.camera_poses, self.object_poses)
        )

    @property
    def initial_pose(self) -> Pose:
        """Ground truth of frame 0 with the initialization offset applied."""
        return compose(self.initial_offset, self.trajectory[0])

    @property
    def bbox_dims(self) -> np.ndarray:
        return self.shape.bbox_dims

    @cached_property
    def landmarks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Object-frame surface points, normals and unit descriptors."""
        rng = np.random.default_rng([self.seed, 1])
        points, normals = self.shape.sample_surface(rng, self.n_landmarks)
        descriptors = rng.normal(size=(self.n_landmarks, DESCRIPTOR_SIZE))
        descriptors /= np.linalg.norm(descriptors, axis=1, keepdims=True)
        return points, normals, descriptors

    def model_points(self, n: int = 2000) -> ModelPoints:
        points, _ = self.shape.sample_surface(np.random.default_rng([self.seed, 2]), n)
        return ModelPoints(points)

    def with_noise(
        self,
        depth_sigma: Optional[float] = None,
        descriptor_sigma: Optional[float] = None,
        outlier_frac: Optional[float] = None,
    ) -> "SyntheticScene":
        changes = {
            "depth_sigma": depth_sigma,
            "descriptor_sigma": descriptor_sigma,
            "outlier_frac": outlier_frac,
        }
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def _check_index(scene: SyntheticScene, t: int) -> None:
    if not 0 <= t < len(scene):
        raise RenderError(f"Frame {t} is outside the {len(scene)}-frame trajectory")


def _camera_rays(K: Intrinsics) -> np.ndarray:
    """Per-pixel ray directions with unit z, row-major (H*W, 3)."""
    u, v = np.meshgrid(np.arange(K.width), np.arange(K.height))
    return np.stack(
        [
            ((u - K.cx) / K.fx).ravel(),
            ((v - K.cy) / K.fy).ravel(),
            np.ones(K.width * K.height),
        ],
        axis=1,
    )


@dataclass(frozen=True, eq=False)
class _Hits:
    depth: np.ndarray  # (H, W), 0 where nothing is hit
    mask: np.ndarray
    object_points: np.ndarray  # (H*W, 3) object-frame hit points
    table_points: np.ndarray  # (H*W, 3) world-frame hit points


def _raycast(scene: SyntheticScene, t: int) -> _Hits:
    K = scene.intrinsics
    rays = _camera_rays(K)
    to_object = inverse(scene.trajectory[t])
    origin = to_object.translation
    directions = rays @ to_object.rotation.T
    # rays have unit z in the camera, so the ray parameter is the depth
    t_obj, _ = scene.shape.intersect(origin, directions)
    reached = np.where(np.isfinite(t_obj), t_obj, 0.0)
    object_points = origin + reached[:, None] * directions

    t_table = np.full(len(rays), np.inf)
    table_points = np.zeros_like(rays)
    if scene.table_height is not None:
        to_world = inverse(scene.camera_poses[t])
        w_origin = to_world.translation
        w_dirs = rays @ to_world.rotation.T
        t_plane = (scene.table_height - w_origin[2]) / _safe(w_dirs[:, 2])
        t_table = np.where(t_plane > 0, t_plane, np.inf)
        table_points = w_origin + np.where(
            np.isfinite(t_table), t_table, 0.0
        )[:, None] * w_dirs

    mask = np.isfinite(t_obj) & (t_obj <= t_table)
    nearest = np.minimum(t_obj, t_table)
    depth = np.where(np.isfinite(nearest), nearest, 0.0)
    shape = (K.height, K.width)
    return _Hits(depth.reshape(shape), mask.reshape(shape), object_points, table_points)


def render(scene: SyntheticScene, t: int) -> RenderedFrame:
    """Color, metric depth, exact mask and ground-truth pose of frame ``t``."""
    _check_index(scene, t)
    hits = _raycast(scene, t)
    if not hits.mask.any():
        raise RenderError(f"Object is outside the view in frame {t}")

    depth = hits.depth
    if scene.depth_sigma > 0:
        rng = np.random.default_rng([scene.seed, t, 7])
        noise = rng.normal(0.0, scene.depth_sigma, size=depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + noise, 1e-6), 0.0)

    flat_mask = hits.mask.ravel()
    intensity = np.zeros(len(flat_mask))
    intensity[flat_mask] = texture(hits.object_points[flat_mask])
    background = ~flat_mask & (hits.depth.ravel() > 0)
    intensity[background] = 0.3 + 0.4 * texture(
        hits.table_points[background], TABLE_CELL
    )
    tint = np.where(flat_mask[:, None], np.array(scene.tint), 0.8)
    color = np.clip(np.rint(intensity[:, None] * tint * 255.0), 0, 255).astype(np.uint8)

    K = scene.intrinsics
    return RenderedFrame(
        color=color.reshape(K.height, K.width, 3),
        depth=depth,
        mask=hits.mask,
        gt_pose=scene.trajectory[t],
    )


def _visible_landmarks(
    scene: SyntheticScene, t: int, hits: Optional[_Hits] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Visibility of every landmark in frame ``t`` and its exact pixel."""
    hits = hits or _raycast(scene, t)
    points, normals, _ = scene.landmarks
    gt = scene.trajectory[t]
    camera_points = gt.apply(points)
    camera_normals = normals @ gt.rotation.T
    pixels, in_front = project_points(camera_points, scene.intrinsics)
    K = scene.intrinsics
    cols, rows = np.rint(pixels[:, 0]), np.rint(pixels[:, 1])
    inside = in_front & (cols >= 0) & (cols < K.width) & (rows >= 0) & (rows < K.height)
    cols = np.where(inside, cols, 0).astype(int)
    rows = np.where(inside, rows, 0).astype(int)

    view = camera_points / np.linalg.norm(camera_points, axis=1, keepdims=True)
    facing = np.einsum("ij,ij->i", camera_normals, view) < -GRAZING_COS
    unoccluded = (
        np.abs(hits.depth[rows, cols] - camera_points[:, 2]) <= VISIBILITY_TOL
    )
    visible = inside & facing & hits.mask[rows, cols] & unoccluded
    return visible, pixels


@dataclass(frozen=True, eq=False)
class LandmarkKeypoints:
    pixels: np.ndarray
    descriptors: np.ndarray
    landmark_ids: np.ndarray  # landmark whose surface point each pixel shows
    descriptor_ids: np.ndarray  # landmark whose descriptor each keypoint carries

    def __len__(self) -> int:
        return len(self.pixels)


def landmark_keypoints(scene: SyntheticScene, t: int) -> LandmarkKeypoints:
    """Keypoints of the visible landmarks with noisy descriptors.

    A fraction ``scene.outlier_frac`` of keypoints carries the descriptor of
    a landmark that is not visible in this frame, which produces wrong
    matches against frames where that landmark is visible.
    """
    _check_index(scene, t)
    visible, pixels = _visible_landmarks(scene, t)
    _, _, descriptors = scene.landmarks
    ids = np.nonzero(visible)[0][: scene.n_keypoints]
    hidden = np.nonzero(~visible)[0]

    rng = np.random.default_rng([scene.seed, t, 11])
    descriptor_ids = ids.copy()
    n_outliers = min(int(round(scene.outlier_frac * len(ids))), len(hidden))
    if n_outliers:
        slots = np.sort(rng.choice(len(ids), size=n_outliers, replace=False))
        descriptor_ids[slots] = rng.choice(hidden, size=n_outliers, replace=False)

    out = descriptors[descriptor_ids]
    if scene.descriptor_sigma > 0:
        out = out + rng.normal(0.0, scene.descriptor_sigma, size=out.shape)
        out /= np.linalg.norm(out, axis=1, keepdims=True)
    return LandmarkKeypoints(pixels[ids], out, ids, descriptor_ids)


class LandmarkKeypointProvider:
    """Keypoints of the scene landmarks, looked up by frame id."""

    def __init__(self, scene: SyntheticScene):
        self.scene = scene

    def detect(self, frame: Frame) -> KeypointSet:
        kp = landmark_keypoints(self.scene, frame.id)
        return keypoints_at_pixels(frame, kp.pixels, kp.descriptors)


@dataclass(frozen=True, eq=False)
class CorrespondenceSample:
    matches: MatchSet
    keypoints_a: KeypointSet
    keypoints_b: KeypointSet
    landmark_ids: np.ndarray


def _exact_keypoints(
    scene: SyntheticScene, t: int, ids: np.ndarray, pixels: np.ndarray
) -> KeypointSet:
    points, normals, descriptors = scene.landmarks
    gt = scene.trajectory[t]
    return KeypointSet(
        pixels=pixels[ids],
        points=gt.apply(points[ids]),
        normals=normals[ids] @ gt.rotation.T,
        descriptors=descriptors[ids],
    )


def ground_truth_correspondences(
    scene: SyntheticScene,
    t1: int,
    t2: int,
    n: int,
    outlier_frac: float = 0.0,
    seed: int = 0,
) -> CorrespondenceSample:
    """``n`` landmarks visible in both frames with exact 3D points.

    Match ``k`` pairs keypoint ``k`` of frame ``t1`` with keypoint ``k`` of
    ``t2``, except for an ``outlier_frac`` share whose partners are rotated
    among themselves so every one of them is wrong.
    """
    _check_index(scene, t1)
    _check_index(scene, t2)
    visible_a, pixels_a = _visible_landmarks(scene, t1)
    visible_b, pixels_b = _visible_landmarks(scene, t2)
    common = np.nonzero(visible_a & visible_b)[0]
    if len(common) < n:
        warnings.warn(
            f"Only {len(common)} landmarks are visible in frames {t1} and {t2}; "
            f"{n} were requested",
            CorrespondenceShortfallWarning,
            stacklevel=2,
        )
        n = len(common)
    if n == 0:
        empty = KeypointSet.empty()
        return CorrespondenceSample(MatchSet.empty(), empty, empty, np.zeros(0, int))

    rng = np.random.default_rng(seed)
    ids = np.sort(rng.choice(common, size=n, replace=False))
    ka = _exact_keypoints(scene, t1, ids, pixels_a)
    kb = _exact_keypoints(scene, t2, ids, pixels_b)

    pairs = np.stack([np.arange(n), np.arange(n)], axis=1)
    n_out = int(round(outlier_frac * n))
    if n_out == 1 and n >= 2:
        n_out = 2
    if n_out >= 2:
        wrong = rng.choice(n, size=n_out, replace=False)
        pairs[wrong, 1] = np.roll(wrong, 1)
    scores = np.linalg.norm(
        ka.descriptors[pairs[:, 0]] - kb.descriptors[pairs[:, 1]], axis=1
    )
    return CorrespondenceSample(MatchSet(pairs, scores), ka, kb, ids)


def default_intrinsics(width: int = 640, height: int = 480) -> Intrinsics:
    f = 525.0 * width / 640.0
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose(R, -R @ eye)


def orbit_scene(
    shape: Shape,
    intrinsics: Intrinsics,
    frames: int = BENCHMARK_FRAMES,
    step_deg: float = STEP_DEG,
    radius: float = 0.55,
    elevation_deg: float = 30.0,
    **kwargs,
) -> SyntheticScene:
    """Camera circling a static object at fixed elevation."""
    elevation = math.radians(elevation_deg)
    cameras = []
    for k in range(frames):
        azimuth = math.radians(step_deg * k)
        eye = radius * np.array(
            [
                math.cos(azimuth) * math.cos(elevation),
                math.sin(azimuth) * math.cos(elevation),
                math.sin(elevation),
            ]
        )
        cameras.append(look_at(eye, np.zeros(3)))
    objects = (Pose.identity(),) * frames
    return SyntheticScene(
        shape=shape,
        intrinsics=intrinsics,
        object_poses=objects,
        camera_poses=tuple(cameras),
        **kwargs,
    )


def manipulation_scene(
    shape: Shape,
    intrinsics: Intrinsics,
    frames: int = BENCHMARK_FRAMES,
    step_deg: float = STEP_DEG,
    step_m: float = 0.002,
    radius: float = 0.55,
    elevation_deg: float = 30.0,
    **kwargs,
) -> SyntheticScene:
    """Static camera; the object turns about a tilted axis while sliding along x."""
    elevation = math.radians(elevation_deg)
    eye = radius * np.array([0.0, -math.cos(elevation), math.sin(elevation)])
    camera = look_at(eye, np.zeros(3))
    axis = np.array([0.3, 0.0, 1.0])
    axis /= np.linalg.norm(axis)
    start = -0.5 * step_m * (frames - 1)
    objects = tuple(
        Pose(
            so3_exp(axis * math.radians(step_deg * k)),
            np.array([start + step_m * k, 0.0, 0.0]),
        )
        for k in range(frames)
    )
    return SyntheticScene(
        shape=shape,
        intrinsics=intrinsics,
        object_poses=objects,
        camera_poses=(camera,) * frames,
        **kwargs,
    )


def drop_frames(
    scene: SyntheticScene, fraction: float, seed: int, name: Optional[str] = None
) -> SyntheticScene:
    """Remove a seeded random share of frames after the first; ids stay contiguous."""
    rng = np.random.default_rng([seed, 3])
    n_drop = int(round(fraction * len(scene)))
    dropped = set(rng.choice(np.arange(1, len(scene)), size=n_drop, replace=False))
    keep = [k for k in range(len(scene)) if k not in dropped]
    return replace(
        scene,
        name=name or scene.name,
        object_poses=tuple(scene.object_poses[k] for k in keep),
        camera_poses=tuple(scene.camera_poses[k] for k in keep),
    )


def initial_offset(
    rng: np.random.Generator, max_translation: float, max_rotation: float = 0.0
) -> Pose:
    """Translation uniform in a ball of ``max_translation``, optional rotation."""
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * max_translation * rng.random() ** (1.0 / 3.0)
    R = random_rotation(rng, max_rotation) if max_rotation > 0 else np.eye(3)
    return Pose(R, t)


def standard_benchmarks(
    seed: int = 0, width: int = 640, height: int = 480
) -> dict[str, SyntheticScene]:
    """The fixed-seed benchmark suite, keyed by scene name."""
    K = default_intrinsics(width, height)
    box = Box((0.10, 0.14, 0.18))
    noise = {
        "depth_sigma": 0.002,
        "descriptor_sigma": 0.01,
        "outlier_frac": 0.2,
        "seed": seed,
    }
    orbit = orbit_scene(box, K, name="ORBIT", **noise)
    manipulate = manipulation_scene(
        box, K, name="MANIPULATE", table_height=-0.2, **noise
    )
    rng = np.random.default_rng([seed, 4])
    return {
        "ORBIT": orbit,
        "MANIPULATE": manipulate,
        "DROPPED": drop_frames(orbit, 0.15, seed, name="DROPPED"),
        "PERTURBED": replace(
            orbit, name="PERTURBED", initial_offset=initial_offset(rng, 0.04)
        ),
        "SENSITIVE": replace(
            orbit,
            name="SENSITIVE",
            initial_offset=initial_offset(rng, 0.04, math.radians(5.0)),
        ),
        "SYMMETRIC": manipulation_scene(
            Cylinder(0.05, 0.16),
            K,
            name="SYMMETRIC",
            table_height=-0.2,
            tint=(0.6, 0.8, 1.0),
            **noise,
        ),
    }
