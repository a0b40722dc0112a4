"""Dataset directory layout, pose logs and diagnostic CSV files.

A dataset directory holds ``intrinsics.txt``, ``color_%06d.png``,
``depth_%06d.png`` (16-bit millimeters), ``mask_%06d.png`` and
``init_pose.txt``, plus optional ``gt_pose_%06d.txt`` and
``keypoints_%06d.txt`` files.
"""

import csv
import logging
import re
from collections.abc import Iterator, Sequence
from dataclasses import fields
from pathlib import Path
from typing import Optional, Union

import cv2
import numpy as np

from object_pose_tracker.errors import DatasetError
from object_pose_tracker.evaluation import ModelPoints
from object_pose_tracker.features import KEYPOINT_PATTERN, write_keypoint_file
from object_pose_tracker.frame import Observation
from object_pose_tracker.geometry import Intrinsics, Pose
from object_pose_tracker.segmentation import MASK_PATTERN, write_mask
from object_pose_tracker.synthetic import SyntheticScene, landmark_keypoints, render
from object_pose_tracker.tracker import EnergyRecord, StageTiming, TrackedPose

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

INTRINSICS_FILE = "intrinsics.txt"
INIT_POSE_FILE = "init_pose.txt"
MODEL_FILE = "model_points.txt"
BBOX_FILE = "bbox.txt"
COLOR_PATTERN = "color_{:06d}.png"
DEPTH_PATTERN = "depth_{:06d}.png"
GT_POSE_PATTERN = "gt_pose_{:06d}.txt"
DEPTH_SCALE = 1000.0
STATUSES = ("ok", "coasted")


def _values(path: Path, count: Optional[int] = None) -> list[float]:
    if not path.exists():
        raise DatasetError(f"Missing file {path}", path)
    try:
        values = [float(v) for v in path.read_text().split()]
    except ValueError as e:
        raise DatasetError(f"Non-numeric value in {path}: {e}", path) from e
    if count is not None and len(values) != count:
        raise DatasetError(
            f"{path} holds {len(values)} values, expected {count}", path
        )
    return values


def read_intrinsics(path: PathLike) -> Intrinsics:
    path = Path(path)
    fx, fy, cx, cy, width, height = _values(path, 6)
    if width != int(width) or height != int(height):
        raise DatasetError(f"Image size in {path} must be integral", path)
    try:
        return Intrinsics(fx, fy, cx, cy, int(width), int(height))
    except ValueError as e:
        raise DatasetError(f"Invalid intrinsics in {path}: {e}", path) from e


def write_intrinsics(path: PathLike, K: Intrinsics) -> None:
    Path(path).write_text(
        f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n"
    )


def pose_from_values(values: Sequence[float]) -> Pose:
    """Pose from 16 row-major values.

    Exactly written poses load unchanged; low-precision rotations are
    projected back onto SO(3).
    """
    matrix = np.array(values, dtype=float).reshape(4, 4)
    try:
        return Pose.from_matrix(matrix)
    except ValueError:
        return Pose.from_matrix(matrix, orthonormalize=True)


def read_pose_file(path: PathLike) -> Pose:
    path = Path(path)
    values = _values(path, 16)
    try:
        return pose_from_values(values)
    except ValueError as e:
        raise DatasetError(f"Invalid pose in {path}: {e}", path) from e


def format_pose(pose: Pose) -> str:
    return " ".join(repr(float(v)) for v in pose.matrix().ravel())


def write_pose_file(path: PathLike, pose: Pose) -> None:
    Path(path).write_text(format_pose(pose) + "\n")


def read_depth(path: PathLike) -> np.ndarray:
    """Depth in meters from a 16-bit millimeter PNG; 0 stays invalid."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Missing depth file {path.name} in {path.parent}", path)
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None or image.dtype != np.uint16 or image.ndim != 2:
        raise DatasetError(f"{path} is not a 16-bit single-channel PNG", path)
    return image.astype(np.float64) / DEPTH_SCALE


def write_depth(path: PathLike, depth: np.ndarray) -> None:
    mm = np.clip(np.rint(np.asarray(depth) * DEPTH_SCALE), 0, np.iinfo(np.uint16).max)
    if not cv2.imwrite(str(path), mm.astype(np.uint16)):
        raise DatasetError(f"Could not write {path}", Path(path))


def read_color(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Missing color file {path.name} in {path.parent}", path)
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DatasetError(f"{path} is not a readable image", path)
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def write_color(path: PathLike, rgb: np.ndarray) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise DatasetError(f"Could not write {path}", Path(path))


def read_model_points(path: PathLike) -> ModelPoints:
    path = Path(path)
    values = _values(path)
    if len(values) == 0 or len(values) % 3:
        raise DatasetError(f"{path} must hold x y z triples", path)
    return ModelPoints(np.array(values).reshape(-1, 3))


def write_model_points(path: PathLike, model: ModelPoints) -> None:
    with open(path, "w") as f:
        for x, y, z in model.points:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_bbox(path: PathLike) -> np.ndarray:
    return np.array(_values(Path(path), 3))


def format_pose_line(record: TrackedPose) -> str:
    return f"{record.frame_id} {format_pose(record.pose)} {record.status}"


def write_pose_log(path: PathLike, records: Sequence[TrackedPose]) -> None:
    """One line per frame: id, 16 row-major pose values, status."""
    with open(path, "w") as f:
        for record in records:
            f.write(format_pose_line(record) + "\n")


def read_pose_log(path: PathLike) -> list[TrackedPose]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Missing pose log {path}", path)
    records = []
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 18 or parts[17] not in STATUSES:
            raise DatasetError(
                f"{path}:{number}: expected frame id, 16 values and a status", path
            )
        try:
            frame_id = int(parts[0])
            pose = pose_from_values([float(v) for v in parts[1:17]])
        except ValueError as e:
            raise DatasetError(f"{path}:{number}: {e}", path) from e
        records.append(TrackedPose(frame_id, pose, parts[17]))  # type: ignore[arg-type]
    return records


def write_energy_log(path: PathLike, records: Sequence[EnergyRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_id", "iter", "E_f", "E_g", "E_total"])
        for r in records:
            writer.writerow(
                [r.frame_id, r.iter, repr(r.E_f), repr(r.E_g), repr(r.E_total)]
            )


def write_timing_log(path: PathLike, timings: Sequence[StageTiming]) -> None:
    """Per-stage milliseconds per frame, with the total last."""
    names = [f.name for f in fields(StageTiming)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([*names, "total"])
        for t in timings:
            stages = [f"{getattr(t, n):.3f}" for n in names[1:]]
            writer.writerow([t.frame_id, *stages, f"{t.total:.3f}"])


class Dataset:
    """Read access to a dataset directory; frames are numbered from 0."""

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise DatasetError(
                f"Dataset directory not found: {self.directory}", self.directory
            )
        self.intrinsics = read_intrinsics(self.directory / INTRINSICS_FILE)
        ids = sorted(
            int(m.group(1))
            for p in self.directory.glob("color_*.png")
            if (m := re.fullmatch(r"color_(\d{6})\.png", p.name))
        )
        if not ids:
            raise DatasetError(
                f"No color_%06d.png frames in {self.directory}", self.directory
            )
        if ids != list(range(len(ids))):
            missing = sorted(set(range(ids[-1] + 1)) - set(ids))
            path = self.directory / COLOR_PATTERN.format(missing[0])
            raise DatasetError(
                f"Frame ids are not contiguous; missing {path.name}", path
            )
        self.frame_ids = ids

    def __len__(self) -> int:
        return len(self.frame_ids)

    def path(self, pattern: str, frame_id: int) -> Path:
        return self.directory / pattern.format(frame_id)

    def observation(self, frame_id: int) -> Observation:
        color = read_color(self.path(COLOR_PATTERN, frame_id))
        depth = read_depth(self.path(DEPTH_PATTERN, frame_id))
        for pattern, image in ((COLOR_PATTERN, color), (DEPTH_PATTERN, depth)):
            if image.shape[:2] != self.intrinsics.shape:
                path = self.path(pattern, frame_id)
                raise DatasetError(
                    f"{path.name} does not match the size in {INTRINSICS_FILE}", path
                )
        return Observation(frame_id, color, depth, self.intrinsics)

    def observations(self) -> Iterator[Observation]:
        for frame_id in self.frame_ids:
            yield self.observation(frame_id)

    def init_pose(self) -> Pose:
        return read_pose_file(self.directory / INIT_POSE_FILE)

    def has_keypoints(self) -> bool:
        return self.path(KEYPOINT_PATTERN, 0).exists()

    def ground_truth(self) -> dict[int, Pose]:
        poses = {}
        for frame_id in self.frame_ids:
            path = self.path(GT_POSE_PATTERN, frame_id)
            if path.exists():
                poses[frame_id] = read_pose_file(path)
        return poses


def read_ground_truth(directory: PathLike) -> dict[int, Pose]:
    """All ``gt_pose_%06d.txt`` files of a directory keyed by frame id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"Ground-truth directory not found: {directory}", directory)
    poses = {}
    for path in sorted(directory.glob("gt_pose_*.txt")):
        m = re.fullmatch(r"gt_pose_(\d{6})\.txt", path.name)
        if m:
            poses[int(m.group(1))] = read_pose_file(path)
    return poses


def write_scene(scene: SyntheticScene, directory: PathLike) -> Path:
    """Render every frame of ``scene`` into the dataset layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_intrinsics(directory / INTRINSICS_FILE, scene.intrinsics)
    write_pose_file(directory / INIT_POSE_FILE, scene.initial_pose)
    write_model_points(directory / MODEL_FILE, scene.model_points())
    (directory / BBOX_FILE).write_text(
        " ".join(repr(float(v)) for v in scene.bbox_dims) + "\n"
    )
    for t in range(len(scene)):
        frame = render(scene, t)
        write_color(directory / COLOR_PATTERN.format(t), frame.color)
        write_depth(directory / DEPTH_PATTERN.format(t), frame.depth)
        write_mask(directory / MASK_PATTERN.format(t), frame.mask)
        write_pose_file(directory / GT_POSE_PATTERN.format(t), frame.gt_pose)
        keypoints = landmark_keypoints(scene, t)
        write_keypoint_file(
            directory / KEYPOINT_PATTERN.format(t),
            keypoints.pixels,
            keypoints.descriptors,
        )
    logger.info("wrote %d frames of %s to %s", len(scene), scene.name, directory)
    return directory
