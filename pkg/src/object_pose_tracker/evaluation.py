"""Pose accuracy metrics: ADD, ADD-S, 5 deg 5 cm, 3D box IoU and AUC."""

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree

from object_pose_tracker.geometry import Pose, inverse, rotation_geodesic

AUC_MAX_THRESHOLD = 0.1
IOU_SAMPLES = 100_000
CURVE_STEPS = 100


@dataclass(frozen=True, eq=False)
class ModelPoints:
    """Object-frame model points in meters."""

    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("Model needs at least one point")
        if not np.all(np.isfinite(points)):
            raise ValueError("Model points must be finite")
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.points)


def add_error(est: Pose, gt: Pose, model: ModelPoints) -> float:
    """Mean distance between model points posed by ``gt`` and by ``est``."""
    diff = gt.apply(model.points) - est.apply(model.points)
    return float(np.linalg.norm(diff, axis=1).mean())


def adds_error(est: Pose, gt: Pose, model: ModelPoints) -> float:
    """Mean closest-point distance; tolerant to object symmetries."""
    distances, _ = cKDTree(est.apply(model.points)).query(gt.apply(model.points))
    return float(np.mean(distances))


def rotation_error_deg(est: Pose, gt: Pose) -> float:
    return math.degrees(rotation_geodesic(est.rotation, gt.rotation))


def translation_error_cm(est: Pose, gt: Pose) -> float:
    return float(np.linalg.norm(est.translation - gt.translation)) * 100.0


def five_deg_five_cm(est: Pose, gt: Pose) -> bool:
    return rotation_error_deg(est, gt) < 5.0 and translation_error_cm(est, gt) < 5.0


def _box_corners(pose: Pose, dims: np.ndarray) -> np.ndarray:
    signs = np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1])).reshape(3, -1).T
    return pose.apply(signs * dims / 2.0)


def box_iou(
    est: Pose,
    gt: Pose,
    bbox_dims: Sequence[float],
    samples: int = IOU_SAMPLES,
    seed: int = 0,
) -> float:
    """Monte Carlo IoU of the object box posed by ``est`` and by ``gt``."""
    dims = np.asarray(bbox_dims, dtype=float)
    if dims.shape != (3,) or np.any(dims <= 0):
        raise ValueError("Box dimensions must be three positive values")
    corners = np.vstack([_box_corners(est, dims), _box_corners(gt, dims)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    points = rng.uniform(lo, hi, size=(samples, 3))
    half = dims / 2.0
    in_est = np.all(np.abs(inverse(est).apply(points)) <= half, axis=1)
    in_gt = np.all(np.abs(inverse(gt).apply(points)) <= half, axis=1)
    union = np.count_nonzero(in_est | in_gt)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_est & in_gt) / union


def iou25(est: Pose, gt: Pose, bbox_dims: Sequence[float], seed: int = 0) -> bool:
    return box_iou(est, gt, bbox_dims, seed=seed) > 0.25


@dataclass(frozen=True)
class FrameMetrics:
    frame_id: int
    add: float
    adds: float
    rotation_error_deg: float
    translation_error_cm: float
    five_deg_five_cm: bool
    iou25: bool


def evaluate_frame(
    frame_id: int,
    est: Pose,
    gt: Pose,
    model: ModelPoints,
    bbox_dims: Sequence[float],
    seed: int = 0,
) -> FrameMetrics:
    return FrameMetrics(
        frame_id=frame_id,
        add=add_error(est, gt, model),
        adds=adds_error(est, gt, model),
        rotation_error_deg=rotation_error_deg(est, gt),
        translation_error_cm=translation_error_cm(est, gt),
        five_deg_five_cm=five_deg_five_cm(est, gt),
        iou25=iou25(est, gt, bbox_dims, seed),
    )


def auc(errors: Sequence[float], max_threshold: float = AUC_MAX_THRESHOLD) -> float:
    """Area under the accuracy-threshold curve on [0, max_threshold], normalized.

    The curve is a sum of steps, so the area is computed exactly.
    """
    e = np.minimum(np.asarray(errors, dtype=float), max_threshold)
    return float(np.mean((max_threshold - e) / max_threshold))


def accuracy_curve(
    errors: Sequence[float],
    max_threshold: float = AUC_MAX_THRESHOLD,
    steps: int = CURVE_STEPS,
) -> tuple[np.ndarray, np.ndarray]:
    thresholds = np.linspace(0.0, max_threshold, steps + 1)
    e = np.asarray(errors, dtype=float)
    accuracy = (e[None, :] <= thresholds[:, None]).mean(axis=1)
    return thresholds, accuracy


class MetricReport(BaseModel):
    """Per-frame metrics plus sequence aggregates.

    Rotation and translation means only count frames passing IoU25; they are
    None when no frame does.
    """

    frames: list[FrameMetrics] = Field(repr=False)
    five_deg_five_cm: float = Field(ge=0, le=100)
    iou25: float = Field(ge=0, le=100)
    rotation_error_mean_deg: Optional[float]
    translation_error_mean_cm: Optional[float]
    add_mean: float
    adds_mean: float
    add_auc: float = Field(ge=0, le=1)
    adds_auc: float = Field(ge=0, le=1)
    auc_max_threshold: float = AUC_MAX_THRESHOLD

    def summary(self) -> dict[str, Union[int, float, None]]:
        return {
            "frames": len(self.frames),
            "five_deg_five_cm": self.five_deg_five_cm,
            "iou25": self.iou25,
            "rotation_error_mean_deg": self.rotation_error_mean_deg,
            "translation_error_mean_cm": self.translation_error_mean_cm,
            "add_mean": self.add_mean,
            "adds_mean": self.adds_mean,
            "add_auc": self.add_auc,
            "adds_auc": self.adds_auc,
            "auc_max_threshold": self.auc_max_threshold,
        }

    def to_text(self) -> str:
        lines = []
        for key, value in self.summary().items():
            lines.append(f"{key} {'absent' if value is None else repr(value)}")
        return "\n".join(lines) + "\n"


def aggregate(
    per_frame: Sequence[FrameMetrics], max_threshold: float = AUC_MAX_THRESHOLD
) -> MetricReport:
    if not per_frame:
        raise ValueError("No frames to aggregate")
    counted = [m for m in per_frame if m.iou25]
    return MetricReport(
        frames=list(per_frame),
        five_deg_five_cm=100.0
        * float(np.mean([m.five_deg_five_cm for m in per_frame])),
        iou25=100.0 * len(counted) / len(per_frame),
        rotation_error_mean_deg=(
            float(np.mean([m.rotation_error_deg for m in counted])) if counted else None
        ),
        translation_error_mean_cm=(
            float(np.mean([m.translation_error_cm for m in counted]))
            if counted
            else None
        ),
        add_mean=float(np.mean([m.add for m in per_frame])),
        adds_mean=float(np.mean([m.adds for m in per_frame])),
        add_auc=auc([m.add for m in per_frame], max_threshold),
        adds_auc=auc([m.adds for m in per_frame], max_threshold),
        auc_max_threshold=max_threshold,
    )


def evaluate_sequence(
    estimates: dict[int, Pose],
    ground_truth: dict[int, Pose],
    model: ModelPoints,
    bbox_dims: Sequence[float],
    seed: int = 0,
) -> MetricReport:
    """Metrics over frames present in both mappings, in frame-id order."""
    ids = sorted(set(estimates) & set(ground_truth))
    if not ids:
        raise ValueError("No frame ids in common")
    return aggregate(
        [
            evaluate_frame(i, estimates[i], ground_truth[i], model, bbox_dims, seed)
            for i in ids
        ]
    )


def write_metrics(path: Union[str, Path], report: MetricReport) -> None:
    Path(path).write_text(report.to_text())


def write_curves(path: Union[str, Path], report: MetricReport) -> None:
    """Threshold (m) against ADD and ADD-S accuracy."""
    thresholds, add_acc = accuracy_curve(
        [m.add for m in report.frames], report.auc_max_threshold
    )
    _, adds_acc = accuracy_curve(
        [m.adds for m in report.frames], report.auc_max_threshold
    )
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "add_accuracy", "adds_accuracy"])
        for row in zip(thresholds, add_acc, adds_acc):
            writer.writerow([repr(float(v)) for v in row])


def write_drift(path: Union[str, Path], report: MetricReport) -> None:
    """Per-frame rotation (deg) and translation (cm) error over time."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_id", "rotation_error_deg", "translation_error_cm"])
        for m in report.frames:
            writer.writerow(
                [m.frame_id, repr(m.rotation_error_deg), repr(m.translation_error_cm)]
            )
