"""Robustified feature and geometric energies and their linearization.

Jacobians are taken with respect to a left perturbation of each node pose,
``T <- exp(delta) T``, matching ``geometry.boxplus``.
"""

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from object_pose_tracker.geometry import Pose, compose, inverse, skew_batch
from object_pose_tracker.pose_graph.graph import PoseGraph

ArrayOrFloat = Union[np.ndarray, float]

# A stored feature edge (a, b) also stands for (b, a), whose residuals are the
# negated ones, so it enters the ordered-pair sum twice.
FEATURE_PAIR_MULTIPLICITY = 2.0


def huber(r: ArrayOrFloat, delta: float) -> tuple[ArrayOrFloat, ArrayOrFloat]:
    """Huber value and IRLS weight of a non-negative residual norm."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r_arr = np.asarray(r, dtype=float)
    quadratic = r_arr <= delta
    safe = np.where(quadratic, 1.0, r_arr)
    value = np.where(quadratic, 0.5 * r_arr**2, delta * (r_arr - 0.5 * delta))
    weight = np.where(quadratic, 1.0, delta / safe)
    if np.ndim(r) == 0:
        return float(value), float(weight)
    return value, weight


def feature_edge_residuals(
    points_a: np.ndarray, points_b: np.ndarray, T_a: Pose, T_b: Pose
) -> np.ndarray:
    """Object-frame disagreements ``T_a^-1 p_m - T_b^-1 p_n``, shape (m, 3)."""
    return inverse(T_a).apply(points_a) - inverse(T_b).apply(points_b)


def dense_edge_residuals(
    points: np.ndarray,
    normals: np.ndarray,
    matched: np.ndarray,
    T_i: Pose,
    T_j: Pose,
) -> np.ndarray:
    """Point-to-plane distances ``n . (T_i T_j^-1 q - p)``."""
    back = compose(T_i, inverse(T_j)).apply(matched)
    return np.einsum("ij,ij->i", normals, back - points)


def residuals_feature(graph: PoseGraph) -> np.ndarray:
    poses = graph.poses()
    blocks = [
        feature_edge_residuals(e.points_a, e.points_b, poses[e.a], poses[e.b])
        for e in graph.feature_edges.values()
        if len(e)
    ]
    return np.concatenate(blocks) if blocks else np.zeros((0, 3))


def residuals_geometric(graph: PoseGraph) -> np.ndarray:
    poses = graph.poses()
    blocks = [
        dense_edge_residuals(e.points, e.normals, e.matched, poses[e.i], poses[e.j])
        for e in graph.dense_edges.values()
        if len(e)
    ]
    return np.concatenate(blocks) if blocks else np.zeros(0)


def energy_feature(graph: PoseGraph) -> float:
    """Huber sum over feature correspondences of all ordered pairs."""
    r = residuals_feature(graph)
    value, _ = huber(np.linalg.norm(r, axis=1), graph.huber.delta_feature)
    return FEATURE_PAIR_MULTIPLICITY * float(np.sum(value))


def energy_geometric(graph: PoseGraph) -> float:
    """Huber sum over dense associations of all ordered pairs."""
    r = residuals_geometric(graph)
    value, _ = huber(np.abs(r), graph.huber.delta_geometric)
    return float(np.sum(value))


@dataclass(frozen=True)
class EnergyBreakdown:
    feature: float
    geometric: float
    total: float


def total_energy(graph: PoseGraph) -> EnergyBreakdown:
    """``lambda1 * E_f + lambda2 * E_g``; a zero weight skips its term."""
    e_f = energy_feature(graph) if graph.lambda1 > 0 else 0.0
    e_g = energy_geometric(graph) if graph.lambda2 > 0 else 0.0
    return EnergyBreakdown(e_f, e_g, graph.lambda1 * e_f + graph.lambda2 * e_g)


@dataclass(frozen=True, eq=False)
class ResidualBlock:
    """Rows of one edge: residuals (m, d), Jacobians (m, d, 6), IRLS weights (m,)."""

    a: int
    b: int
    residuals: np.ndarray
    jac_a: np.ndarray
    jac_b: np.ndarray
    weights: np.ndarray
    scale: float


def feature_jacobians(
    points_a: np.ndarray, points_b: np.ndarray, T_a: Pose, T_b: Pose
) -> tuple[np.ndarray, np.ndarray]:
    m = len(points_a)
    jac_a = np.zeros((m, 3, 6))
    jac_a[:, :, :3] = -T_a.rotation.T
    jac_a[:, :, 3:] = np.einsum("ij,mjk->mik", T_a.rotation.T, skew_batch(points_a))
    jac_b = np.zeros((m, 3, 6))
    jac_b[:, :, :3] = T_b.rotation.T
    jac_b[:, :, 3:] = -np.einsum("ij,mjk->mik", T_b.rotation.T, skew_batch(points_b))
    return jac_a, jac_b


def dense_jacobians(
    points: np.ndarray,
    normals: np.ndarray,
    matched: np.ndarray,
    T_i: Pose,
    T_j: Pose,
) -> tuple[np.ndarray, np.ndarray]:
    m = len(points)
    j_to_i = compose(T_i, inverse(T_j))
    back = j_to_i.apply(matched)
    jac_i = np.zeros((m, 1, 6))
    jac_i[:, 0, :3] = normals
    jac_i[:, 0, 3:] = np.cross(back, normals)
    # n^T R_i R_j^T [-I | [q]x]
    turned = normals @ j_to_i.rotation
    jac_j = np.zeros((m, 1, 6))
    jac_j[:, 0, :3] = -turned
    jac_j[:, 0, 3:] = np.cross(turned, matched)
    return jac_i, jac_j


def _residual_blocks(graph: PoseGraph) -> list[ResidualBlock]:
    poses = graph.poses()
    blocks = []
    if graph.lambda1 > 0:
        for e in graph.feature_edges.values():
            if not len(e):
                continue
            r = feature_edge_residuals(e.points_a, e.points_b, poses[e.a], poses[e.b])
            _, w = huber(np.linalg.norm(r, axis=1), graph.huber.delta_feature)
            ja, jb = feature_jacobians(e.points_a, e.points_b, poses[e.a], poses[e.b])
            scale = FEATURE_PAIR_MULTIPLICITY * graph.lambda1
            blocks.append(ResidualBlock(e.a, e.b, r, ja, jb, w, scale))
    if graph.lambda2 > 0:
        for e in graph.dense_edges.values():
            if not len(e):
                continue
            r = dense_edge_residuals(
                e.points, e.normals, e.matched, poses[e.i], poses[e.j]
            )
            _, w = huber(np.abs(r), graph.huber.delta_geometric)
            ji, jj = dense_jacobians(
                e.points, e.normals, e.matched, poses[e.i], poses[e.j]
            )
            blocks.append(ResidualBlock(e.i, e.j, r[:, None], ji, jj, w, graph.lambda2))
    return blocks


@dataclass(eq=False)
class LinearSystem:
    """Gauss-Newton normal equations kept as per-edge 6x6 blocks.

    Unknowns are the twists of free nodes in node order; ``column`` maps a
    node index to its block position. Fixed nodes have no columns.
    """

    n_nodes: int
    column: dict[int, int]
    blocks: list[ResidualBlock]
    _hessian: list[tuple[int, int, np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=list, repr=False
    )
    gradient: np.ndarray = field(init=False)
    diagonal: np.ndarray = field(init=False)

    def __post_init__(self):
        size = 6 * len(self.column)
        self.gradient = np.zeros(size)
        self.diagonal = np.zeros(size)
        for block in self.blocks:
            d = block.residuals.shape[1]
            sw = np.repeat(block.scale * block.weights, d)
            Ja = block.jac_a.reshape(-1, 6)
            Jb = block.jac_b.reshape(-1, 6)
            wJa = sw[:, None] * Ja
            wJb = sw[:, None] * Jb
            Haa = wJa.T @ Ja
            Hab = wJa.T @ Jb
            Hbb = wJb.T @ Jb
            r = block.residuals.reshape(-1)
            ga = wJa.T @ r
            gb = wJb.T @ r
            self._hessian.append((block.a, block.b, Haa, Hab, Hbb))
            for node, H, g in ((block.a, Haa, ga), (block.b, Hbb, gb)):
                if node in self.column:
                    s = slice(6 * self.column[node], 6 * self.column[node] + 6)
                    self.gradient[s] += g
                    self.diagonal[s] += np.diag(H)

    @property
    def size(self) -> int:
        return 6 * len(self.column)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``J^T W J x`` without forming J."""
        y = np.zeros(self.size)
        xs = x.reshape(-1, 6)
        for a, b, Haa, Hab, Hbb in self._hessian:
            ca, cb = self.column.get(a), self.column.get(b)
            if ca is not None:
                y[6 * ca : 6 * ca + 6] += Haa @ xs[ca]
                if cb is not None:
                    y[6 * ca : 6 * ca + 6] += Hab @ xs[cb]
            if cb is not None:
                y[6 * cb : 6 * cb + 6] += Hbb @ xs[cb]
                if ca is not None:
                    y[6 * cb : 6 * cb + 6] += Hab.T @ xs[ca]
        return y

    def jacobian(self) -> np.ndarray:
        """Dense stacked Jacobian (rows x free columns); for inspection only."""
        rows = []
        for block in self.blocks:
            m, d, _ = block.jac_a.shape
            J = np.zeros((m * d, self.size))
            for node, jac in ((block.a, block.jac_a), (block.b, block.jac_b)):
                if node in self.column:
                    c = 6 * self.column[node]
                    J[:, c : c + 6] = jac.reshape(m * d, 6)
            rows.append(J)
        return np.vstack(rows) if rows else np.zeros((0, self.size))

    def residuals(self) -> np.ndarray:
        parts = [block.residuals.reshape(-1) for block in self.blocks]
        return np.concatenate(parts) if parts else np.zeros(0)


def linearize(graph: PoseGraph) -> LinearSystem:
    """IRLS-weighted normal equations at the current node poses."""
    column = {k: c for c, k in enumerate(graph.free_indices)}
    return LinearSystem(len(graph.nodes), column, _residual_blocks(graph))
