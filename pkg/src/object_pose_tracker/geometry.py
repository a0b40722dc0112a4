"""SE(3) machinery, camera projection and rotation metrics.

Twists are ordered translation first, rotation second. Pose increments are
applied on the left, in the camera frame: ``boxplus(xi, delta)`` is
``log(exp(delta) @ exp(xi))``.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SMALL_ANGLE = 1e-8
# above this angle log_map reads the axis off the symmetric part of R
NEAR_PI = math.pi - 1e-3
ORTHONORMAL_TOL = 1e-9

_IDENTITY3 = np.eye(3)


def _frozen(values, shape) -> np.ndarray:
    array = np.array(values, dtype=float).reshape(shape)
    array.setflags(write=False)
    return array


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator: the 3x3 matrix with ``skew(v) @ x == cross(v, x)``."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Hat operator over the rows of an (n, 3) array; returns (n, 3, 3)."""
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform in SE(3), object frame to camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("Pose entries must be finite")
        if np.abs(R.T @ R - _IDENTITY3).max() >= ORTHONORMAL_TOL:
            raise ValueError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) >= ORTHONORMAL_TOL:
            raise ValueError("Pose rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, orthonormalize: bool = False) -> "Pose":
        """Build from a 4x4 homogeneous matrix.

        With ``orthonormalize`` the rotation block is projected onto SO(3),
        which is needed for matrices read from text with few digits.
        """
        M = np.asarray(matrix, dtype=float).reshape(4, 4)
        R = M[:3, :3]
        if orthonormalize:
            U, _, Vt = np.linalg.svd(R)
            D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
            R = U @ D @ Vt
        return cls(R, M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (n, 3) array (or a single 3-vector) of points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


@dataclass(frozen=True, eq=False)
class Twist:
    """Tangent vector in se(3): translation part (m), rotation part (rad)."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3,)))

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "Twist":
        v = np.asarray(vector, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("Focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("Principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def _rodrigues_coefficients(theta: float) -> tuple[float, float, float]:
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    A, B, _ = _rodrigues_coefficients(theta)
    W = skew(phi)
    return _IDENTITY3 + A * W + B * (W @ W)


def exp_map(xi: Twist) -> Pose:
    """Closed-form SE(3) exponential."""
    phi = xi.rotation
    theta = float(np.linalg.norm(phi))
    A, B, C = _rodrigues_coefficients(theta)
    W = skew(phi)
    W2 = W @ W
    R = _IDENTITY3 + A * W + B * W2
    V = _IDENTITY3 + B * W + C * W2
    return Pose(R, V @ xi.translation)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector with angle in [0, pi]."""
    cos_theta = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    theta = math.acos(cos_theta)
    skew_part = vee(R - R.T) / 2.0
    if theta < SMALL_ANGLE:
        return skew_part
    if theta > NEAR_PI:
        # symmetric part is cos(theta) I + (1 - cos(theta)) a a^T
        aat = ((R + R.T) / 2.0 - cos_theta * _IDENTITY3) / (1.0 - cos_theta)
        k = int(np.argmax(np.diag(aat)))
        axis = aat[:, k] / math.sqrt(aat[k, k])
        axis /= np.linalg.norm(axis)
        if np.dot(axis, skew_part) < 0.0:
            axis = -axis
        return theta * axis
    return skew_part * (theta / math.sin(theta))


def log_map(T: Pose) -> Twist:
    """Canonical SE(3) logarithm; inverse of ``exp_map`` for angles below pi."""
    phi = so3_log(T.rotation)
    theta = float(np.linalg.norm(phi))
    _, B, C = _rodrigues_coefficients(theta)
    W = skew(phi)
    V = _IDENTITY3 + B * W + C * (W @ W)
    return Twist(np.linalg.solve(V, T.translation), phi)


def compose(A: Pose, B: Pose) -> Pose:
    """``A @ B``: apply B first, then A."""
    return Pose(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def inverse(T: Pose) -> Pose:
    Rt = T.rotation.T
    return Pose(Rt, -Rt @ T.translation)


def boxplus(xi: Twist, delta: Twist) -> Twist:
    """Left-multiplicative retraction ``log(exp(delta) exp(xi))``."""
    if not delta.as_vector().any():
        return xi
    return log_map(compose(exp_map(delta), exp_map(xi)))


def rotation_geodesic(Ri: np.ndarray, Rj: np.ndarray) -> float:
    """Angle of the relative rotation, ``arccos((tr(Ri^T Rj) - 1) / 2)``.

    Evaluated as atan2 of the skew and trace parts, which equals the clamped
    arccos and keeps full precision near 0 and pi.
    """
    M = np.asarray(Ri).T @ np.asarray(Rj)
    cos_part = float(np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0))
    sin_part = float(np.linalg.norm(vee(M - M.T))) / 2.0
    return math.atan2(sin_part, cos_part)


def project(p: np.ndarray, K: Intrinsics) -> Optional[np.ndarray]:
    """Pixel of a camera-frame point, or None when the point is not in front."""
    x, y, z = (float(c) for c in p)
    if z <= 0.0:
        return None
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def unproject(u: float, v: float, d: float, K: Intrinsics) -> Optional[np.ndarray]:
    """Camera-frame point at pixel (u, v) with depth d, or None if invalid."""
    if d <= 0.0 or not (0.0 <= u <= K.width - 1 and 0.0 <= v <= K.height - 1):
        return None
    return np.array([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d])


def project_points(points: np.ndarray, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``project``; returns pixels (n, 2) and a validity mask."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    z = points[:, 2]
    valid = z > 0.0
    safe_z = np.where(valid, z, 1.0)
    pixels = np.empty((len(points), 2))
    pixels[:, 0] = K.fx * points[:, 0] / safe_z + K.cx
    pixels[:, 1] = K.fy * points[:, 1] / safe_z + K.cy
    return pixels, valid


def unproject_depth(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Per-pixel camera-frame points (H, W, 3) of a depth map."""
    H, W = depth.shape
    u = (np.arange(W, dtype=float) - K.cx) / K.fx
    v = (np.arange(H, dtype=float) - K.cy) / K.fy
    cloud = np.empty((H, W, 3))
    cloud[..., 0] = depth * u[None, :]
    cloud[..., 1] = depth * v[:, None]
    cloud[..., 2] = depth
    return cloud


def random_rotation(rng: np.random.Generator, max_angle: float = math.pi) -> np.ndarray:
    """Rotation about a uniformly drawn axis by an angle uniform in [0, max_angle)."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))
