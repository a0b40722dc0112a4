"""Keypoints, descriptor matching and RANSAC rigid registration.

The pipeline depends only on the ``KeypointSet`` contract: a classical
Harris + SIFT-descriptor detector is the default provider and precomputed
keypoint files can be injected instead.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Union

import cv2
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from object_pose_tracker.errors import (
    DegenerateSampleError,
    ProviderError,
    RegistrationFailure,
)
from object_pose_tracker.frame import Frame
from object_pose_tracker.geometry import Pose, compose

logger = logging.getLogger(__name__)

DESCRIPTOR_SIZE = 128
KEYPOINT_PATTERN = "keypoints_{:06d}.txt"
RANSAC_BATCH = 256
RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Keypoint:
    pixel: np.ndarray
    point: np.ndarray
    normal: np.ndarray
    descriptor: np.ndarray


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Keypoints of one frame as parallel arrays."""

    pixels: np.ndarray  # (n, 2)
    points: np.ndarray  # (n, 3) camera frame
    normals: np.ndarray  # (n, 3) unit
    descriptors: np.ndarray  # (n, 128)

    def __post_init__(self):
        if self.descriptors.shape[1:] != (DESCRIPTOR_SIZE,):
            raise ValueError(
                f"Descriptors must have length {DESCRIPTOR_SIZE}, "
                f"got shape {self.descriptors.shape}"
            )

    @classmethod
    def empty(cls) -> "KeypointSet":
        return cls(
            np.zeros((0, 2)),
            np.zeros((0, 3)),
            np.zeros((0, 3)),
            np.zeros((0, DESCRIPTOR_SIZE)),
        )

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> Keypoint:
        return Keypoint(
            self.pixels[i], self.points[i], self.normals[i], self.descriptors[i]
        )

    def subset(self, index: np.ndarray) -> "KeypointSet":
        return KeypointSet(
            self.pixels[index],
            self.points[index],
            self.normals[index],
            self.descriptors[index],
        )


@dataclass(frozen=True, eq=False)
class MatchSet:
    """Index pairs into two keypoint sets with their descriptor distances."""

    pairs: np.ndarray  # (m, 2) int
    scores: np.ndarray  # (m,)

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.zeros((0, 2), dtype=int), np.zeros(0))

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, index: np.ndarray) -> "MatchSet":
        return MatchSet(self.pairs[index], self.scores[index])

    def swapped(self) -> "MatchSet":
        return MatchSet(self.pairs[:, ::-1].copy(), self.scores.copy())


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    relative_pose: Pose
    inliers: MatchSet
    mean_residual: float

    @property
    def inlier_count(self) -> int:
        return len(self.inliers)


class KeypointProvider(Protocol):
    def detect(self, frame: Frame) -> KeypointSet: ...


def keypoints_at_pixels(
    frame: Frame, pixels: np.ndarray, descriptors: np.ndarray
) -> KeypointSet:
    """Attach 3D points and normals; pixels without both are dropped."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    descriptors = np.asarray(descriptors, dtype=float).reshape(-1, DESCRIPTOR_SIZE)
    if len(pixels) == 0:
        return KeypointSet.empty()
    H, W = frame.shape
    cols = np.rint(pixels[:, 0]).astype(int)
    rows = np.rint(pixels[:, 1]).astype(int)
    inside = (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
    cols, rows = np.clip(cols, 0, W - 1), np.clip(rows, 0, H - 1)
    keep = inside & frame.valid[rows, cols] & frame.normal_valid[rows, cols]

    K = frame.intrinsics
    d = frame.depth[rows[keep], cols[keep]]
    kept = pixels[keep]
    points = np.stack(
        [(kept[:, 0] - K.cx) * d / K.fx, (kept[:, 1] - K.cy) * d / K.fy, d], axis=1
    )
    return KeypointSet(
        pixels=kept,
        points=points,
        normals=frame.normals[rows[keep], cols[keep]],
        descriptors=descriptors[keep],
    )


def _orientation(gray: np.ndarray, pixels: np.ndarray, radius: int) -> np.ndarray:
    """Intensity-centroid angle (degrees) of a disc patch around each pixel."""
    padded = cv2.copyMakeBorder(
        gray.astype(np.float64), radius, radius, radius, radius, cv2.BORDER_REFLECT
    )
    offsets = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(offsets, offsets, indexing="ij")
    disc = dx**2 + dy**2 <= radius**2
    dx, dy = dx[disc], dy[disc]
    cols = pixels[:, 0].astype(int)[:, None] + radius + dx[None, :]
    rows = pixels[:, 1].astype(int)[:, None] + radius + dy[None, :]
    patch = padded[rows, cols]
    return np.degrees(np.arctan2(patch @ dy, patch @ dx)) % 360.0


class HarrisSiftDetector:
    """Multi-scale Harris corners inside the mask with SIFT descriptors."""

    def __init__(
        self,
        n_keypoints: int = 500,
        levels: int = 2,
        quality: float = 0.01,
        min_distance: float = 3.0,
        patch_size: float = 16.0,
    ):
        self.n_keypoints = n_keypoints
        self.levels = levels
        self.quality = quality
        self.min_distance = min_distance
        self.patch_size = patch_size
        self._sift = cv2.SIFT_create()

    def _corners(self, gray: np.ndarray, mask: np.ndarray):
        found = []
        image, region = gray, mask
        for level in range(self.levels):
            scale = 2**level
            corners = cv2.goodFeaturesToTrack(
                image,
                maxCorners=self.n_keypoints * 2,
                qualityLevel=self.quality,
                minDistance=self.min_distance,
                mask=region,
                blockSize=3,
                useHarrisDetector=True,
                k=0.04,
            )
            if corners is not None:
                response = cv2.cornerHarris(np.float32(image), 3, 3, 0.04)
                peak = float(response.max()) or 1.0
                xy = corners.reshape(-1, 2)
                c = np.rint(xy).astype(int)
                c[:, 0] = np.clip(c[:, 0], 0, image.shape[1] - 1)
                c[:, 1] = np.clip(c[:, 1], 0, image.shape[0] - 1)
                score = response[c[:, 1], c[:, 0]] / peak
                for (u, v), s in zip(xy * scale, score):
                    found.append((float(s), level, float(u), float(v)))
            if min(image.shape) < 32:
                break
            image = cv2.pyrDown(image)
            region = cv2.resize(
                region,
                (image.shape[1], image.shape[0]),
                interpolation=cv2.INTER_NEAREST,
            )
        # strongest first; ties by level, then row-major position
        found.sort(key=lambda c: (-c[0], c[1], c[3], c[2]))
        return found

    def detect(self, frame: Frame) -> KeypointSet:
        usable = frame.valid & frame.normal_valid
        if not usable.any():
            return KeypointSet.empty()
        gray = frame.gray()
        mask = usable.astype(np.uint8) * 255

        candidates = []
        for _, level, u, v in self._corners(gray, mask):
            r, c = int(round(v)), int(round(u))
            if 0 <= r < frame.shape[0] and 0 <= c < frame.shape[1] and usable[r, c]:
                candidates.append((level, u, v))
        if not candidates:
            return KeypointSet.empty()

        # greedy suppression in strength order over one neighbourhood query
        xy = np.array([(u, v) for _, u, v in candidates])
        neighbours = cKDTree(xy).query_ball_point(xy, self.min_distance)
        taken = np.zeros(len(candidates), dtype=bool)
        selected: list[tuple[int, float, float]] = []
        for k, candidate in enumerate(candidates):
            if taken[neighbours[k]].any():
                continue
            taken[k] = True
            selected.append(candidate)
            if len(selected) == self.n_keypoints:
                break

        pixels = np.array([(u, v) for _, u, v in selected])
        angles = _orientation(gray, np.rint(pixels), radius=7)
        cv_keypoints = [
            cv2.KeyPoint(
                float(u), float(v), self.patch_size * 2**level, float(a), 0, 0, i
            )
            for i, ((level, u, v), a) in enumerate(zip(selected, angles))
        ]
        described, descriptors = self._sift.compute(gray, cv_keypoints)
        if descriptors is None or len(described) == 0:
            return KeypointSet.empty()
        order = np.array([kp.class_id for kp in described])
        descriptors = descriptors.astype(np.float64)
        norms = np.linalg.norm(descriptors, axis=1, keepdims=True)
        descriptors /= np.where(norms > 0, norms, 1.0)
        keypoints = keypoints_at_pixels(frame, pixels[order], descriptors)
        logger.debug("frame %d: %d keypoints detected", frame.id, len(keypoints))
        return keypoints


def detect_keypoints(frame: Frame, target_n: int = 500) -> KeypointSet:
    """Up to ``target_n`` ranked keypoints inside the mask; deterministic."""
    return HarrisSiftDetector(n_keypoints=target_n).detect(frame)


def read_keypoint_file(path: Union[str, Path]) -> tuple[np.ndarray, np.ndarray]:
    """Pixels (n, 2) and descriptors (n, 128) from ``u v d_1 ... d_128`` lines."""
    path = Path(path)
    if not path.exists():
        raise ProviderError(f"Keypoint file not found: {path}")
    rows = [line.split() for line in path.read_text().splitlines() if line.strip()]
    if not rows:
        return np.zeros((0, 2)), np.zeros((0, DESCRIPTOR_SIZE))
    for number, row in enumerate(rows, start=1):
        if len(row) != 2 + DESCRIPTOR_SIZE:
            raise ProviderError(
                f"{path}:{number}: expected {2 + DESCRIPTOR_SIZE} values, "
                f"got {len(row)}"
            )
    data = np.array(rows, dtype=float)
    return data[:, :2], data[:, 2:]


def write_keypoint_file(
    path: Union[str, Path], pixels: np.ndarray, descriptors: np.ndarray
) -> None:
    with open(path, "w") as f:
        for pixel, descriptor in zip(pixels, descriptors):
            values = [*pixel, *descriptor]
            f.write(" ".join(repr(float(x)) for x in values) + "\n")


class KeypointFileProvider:
    """Loads ``keypoints_%06d.txt`` files produced by an external detector."""

    def __init__(self, directory: Union[str, Path], pattern: str = KEYPOINT_PATTERN):
        self.directory = Path(directory)
        self.pattern = pattern

    def detect(self, frame: Frame) -> KeypointSet:
        pixels, descriptors = read_keypoint_file(
            self.directory / self.pattern.format(frame.id)
        )
        return keypoints_at_pixels(frame, pixels, descriptors)


def match_descriptors(
    a: KeypointSet, b: KeypointSet, ratio: float = 0.8
) -> MatchSet:
    """Mutual nearest neighbours in descriptor space passing the ratio test."""
    if len(a) == 0 or len(b) == 0:
        return MatchSet.empty()
    distances = cdist(a.descriptors, b.descriptors)
    forward = np.argmin(distances, axis=1)
    backward = np.argmin(distances, axis=0)
    rows = np.arange(len(a))
    mutual = backward[forward] == rows

    best = distances[rows, forward]
    if len(b) >= 2:
        second = np.partition(distances, 1, axis=1)[:, 1]
        mutual &= best < ratio * second
    keep = np.nonzero(mutual)[0]
    return MatchSet(np.stack([keep, forward[keep]], axis=1), best[keep])


def _kabsch(
    src: np.ndarray, dst: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched closed-form rigid fit of (h, n, 3) point sets.

    Returns rotations (h, 3, 3), translations (h, 3) and a mask of fits whose
    cross-covariance has rank at least two.
    """
    src_c = src.mean(axis=1, keepdims=True)
    dst_c = dst.mean(axis=1, keepdims=True)
    H = np.einsum("hni,hnj->hij", src - src_c, dst - dst_c)
    U, S, Vt = np.linalg.svd(H)
    ok = S[:, 1] > RANK_TOL * np.maximum(S[:, 0], 1e-300)
    ok &= S[:, 0] > 1e-300
    d = np.sign(np.linalg.det(np.einsum("hji,hkj->hik", Vt, U)))
    d[d == 0] = 1.0
    D = np.zeros((len(src), 3, 3))
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.einsum("hji,hjk,hlk->hil", Vt, D, U)
    t = dst_c[:, 0] - np.einsum("hij,hj->hi", R, src_c[:, 0])
    return R, t, ok


def rigid_least_squares(src: np.ndarray, dst: np.ndarray) -> Pose:
    """SE(3) transform minimizing sum ||T src - dst||^2 over >= 3 pairs."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("Point sets must have equal length")
    if len(src) < 3:
        raise DegenerateSampleError(f"Need at least 3 point pairs, got {len(src)}")
    R, t, ok = _kabsch(src[None], dst[None])
    if not ok[0]:
        raise DegenerateSampleError("Point pairs are collinear or coincident")
    return Pose(R[0], t[0])


def _sample_triples(rng: np.random.Generator, m: int, count: int) -> np.ndarray:
    """``count`` rows of three distinct indices below ``m``."""
    i0 = rng.integers(0, m, size=count)
    i1 = rng.integers(0, m - 1, size=count)
    i1 += i1 >= i0
    i2 = rng.integers(0, m - 2, size=count)
    lo, hi = np.minimum(i0, i1), np.maximum(i0, i1)
    i2 += i2 >= lo
    i2 += i2 >= hi
    return np.stack([i0, i1, i2], axis=1)


def _gate(
    R: np.ndarray,
    t: np.ndarray,
    pa: np.ndarray,
    pb: np.ndarray,
    na: np.ndarray,
    nb: np.ndarray,
    delta: float,
    cos_alpha: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Inlier masks and distances for a batch of (h) hypotheses."""
    moved = np.einsum("hij,mj->hmi", R, pa) + t[:, None, :]
    dist = np.linalg.norm(moved - pb[None], axis=2)
    turned = np.einsum("hij,mj->hmi", R, na)
    cos = np.einsum("hmi,mi->hm", turned, nb)
    return (dist <= delta) & (cos >= cos_alpha), dist


def ransac_register(
    matches: MatchSet,
    a: KeypointSet,
    b: KeypointSet,
    delta: float = 0.005,
    alpha: float = math.radians(45.0),
    iterations: int = 2000,
    seed: int = 0,
    early_exit_ratio: float = 0.9,
    refine_rounds: int = 3,
) -> RegistrationResult:
    """Relative pose mapping keypoints of ``a`` onto ``b``.

    Hypotheses from 3-pair samples are evaluated in batches; the winner has
    the most inliers, then the lowest mean inlier distance, then the lowest
    sample index. Its inliers are refit and re-gated under the refit pose; when
    no refit keeps 3 inliers the hypothesis fit is returned as it was.
    """
    m = len(matches)
    if m < 3:
        raise RegistrationFailure(f"Need at least 3 matches, got {m}")
    pa, pb = a.points[matches.pairs[:, 0]], b.points[matches.pairs[:, 1]]
    na, nb = a.normals[matches.pairs[:, 0]], b.normals[matches.pairs[:, 1]]
    cos_alpha = math.cos(alpha)

    rng = np.random.default_rng(seed)
    samples = _sample_triples(rng, m, iterations)
    best_key: Optional[tuple[int, float]] = None
    best_inliers = None
    best_fit: Optional[tuple[np.ndarray, np.ndarray]] = None
    for start in range(0, iterations, RANSAC_BATCH):
        batch = samples[start : start + RANSAC_BATCH]
        R, t, ok = _kabsch(pa[batch], pb[batch])
        inlier, dist = _gate(R, t, pa, pb, na, nb, delta, cos_alpha)
        inlier &= ok[:, None]
        counts = inlier.sum(axis=1)
        means = np.where(
            counts > 0, (dist * inlier).sum(axis=1) / np.maximum(counts, 1), np.inf
        )
        # lexsort: last key is primary
        h = int(np.lexsort((np.arange(len(batch)), means, -counts))[0])
        key = (-int(counts[h]), float(means[h]))
        if best_key is None or key < best_key:
            best_key, best_inliers = key, inlier[h]
            best_fit = (R[h], t[h])
        if -best_key[0] > early_exit_ratio * m:
            break

    if best_key is None or best_fit is None or -best_key[0] < 3:
        raise RegistrationFailure("No hypothesis reached 3 inliers")

    inliers = best_inliers
    pose: Optional[Pose] = None
    for _ in range(refine_rounds):
        try:
            candidate = rigid_least_squares(pa[inliers], pb[inliers])
        except DegenerateSampleError:
            break
        regated, _ = _gate(
            candidate.rotation[None],
            candidate.translation[None],
            pa,
            pb,
            na,
            nb,
            delta,
            cos_alpha,
        )
        count = int(regated[0].sum())
        if count < 3 or (pose is not None and count < inliers.sum()):
            break
        settled = np.array_equal(regated[0], inliers)
        pose, inliers = candidate, regated[0]
        if settled:
            break
    if pose is None:
        pose, inliers = Pose(*best_fit), best_inliers

    _, dist = _gate(
        pose.rotation[None], pose.translation[None], pa, pb, na, nb, delta, cos_alpha
    )
    index = np.nonzero(inliers)[0]
    return RegistrationResult(
        relative_pose=pose,
        inliers=matches.subset(index),
        mean_residual=float(dist[0, index].mean()),
    )


def coarse_pose(prev_pose: Pose, reg: RegistrationResult) -> Pose:
    """Current-frame estimate ``T_rel @ T_prev`` (camera-frame motion)."""
    return compose(reg.relative_pose, prev_pose)
