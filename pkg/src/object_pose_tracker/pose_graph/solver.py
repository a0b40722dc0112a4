"""IRLS Gauss-Newton over the pose graph with a Jacobi-preconditioned CG solve."""

import logging
import warnings
from collections.abc import Callable
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from object_pose_tracker.errors import DegradedSolveWarning, GraphUnconstrainedError
from object_pose_tracker.frame import masked_points
from object_pose_tracker.geometry import Pose, Twist, boxplus
from object_pose_tracker.pose_graph.edges import build_dense_edges
from object_pose_tracker.pose_graph.energy import (
    EnergyBreakdown,
    linearize,
    total_energy,
)
from object_pose_tracker.pose_graph.graph import PoseGraph

logger = logging.getLogger(__name__)

Operator = Union[Callable[[np.ndarray], np.ndarray], np.ndarray, LinearOperator]


@dataclass(frozen=True, eq=False)
class PCGResult:
    x: np.ndarray
    iterations: int
    relative_residual: float
    degraded: bool = False


def pcg_solve(
    apply_A: Operator,
    b: np.ndarray,
    preconditioner: Optional[np.ndarray] = None,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> PCGResult:
    """Preconditioned conjugate gradient for a symmetric PSD system.

    ``preconditioner`` is the diagonal of A (Jacobi); zero entries are treated
    as one. A non-positive curvature direction ends the solve and returns the
    best iterate seen, flagged as degraded.
    """
    if not callable(apply_A):
        apply_A = aslinearoperator(apply_A).matvec
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("Right-hand side must be finite")
    if preconditioner is None:
        inv_diag = np.ones_like(b)
    else:
        diag = np.asarray(preconditioner, dtype=float)
        inv_diag = 1.0 / np.where(diag > 0, diag, 1.0)

    x = np.zeros_like(b)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return PCGResult(x, 0, 0.0)

    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    best_x, best_res = x.copy(), 1.0
    for k in range(1, max_iter + 1):
        Ap = apply_A(p)
        curvature = float(p @ Ap)
        if not np.isfinite(curvature) or curvature <= 0.0:
            warnings.warn(
                f"PCG breakdown at iteration {k}: curvature {curvature:.3e}",
                DegradedSolveWarning,
                stacklevel=2,
            )
            return PCGResult(best_x, k, best_res, degraded=True)
        alpha = rz / curvature
        x = x + alpha * p
        r = r - alpha * Ap
        res = float(np.linalg.norm(r)) / b_norm
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= tol:
            return PCGResult(x, k, res)
        z = inv_diag * r
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next
    return PCGResult(best_x, max_iter, best_res)


@dataclass(eq=False)
class OptimizeResult:
    poses: list[Pose]
    energies: list[EnergyBreakdown] = field(default_factory=list)
    accepted_steps: int = 0
    degraded: bool = False

    @property
    def initial_energy(self) -> float:
        return self.energies[0].total

    @property
    def final_energy(self) -> float:
        return self.energies[-1].total


def _step(twists: list[Twist], columns: dict[int, int], delta: np.ndarray, scale):
    stepped = list(twists)
    for node, c in columns.items():
        increment = Twist.from_vector(scale * delta[6 * c : 6 * c + 6])
        stepped[node] = boxplus(twists[node], increment)
    return stepped


def optimize(
    graph: PoseGraph,
    gn_iters: int = 7,
    pcg_tol: float = 1e-6,
    pcg_max_iter: int = 100,
    max_step_halvings: int = 5,
    energy_tol: float = 1e-6,
    executor: Optional[Executor] = None,
) -> OptimizeResult:
    """Minimize ``lambda1 E_f + lambda2 E_g`` over the free node twists.

    Each round recomputes IRLS weights, solves the normal equations and
    applies the step on the left. Trial steps are scored against the dense
    associations of the current iterate; a step that raises the energy is
    halved, up to ``max_step_halvings`` times. Dense correspondences are
    re-associated once per accepted step, and the step is rolled back when
    the re-associated energy exceeds the previous one. The loop stops when
    no step is accepted, or when an accepted step lowers the energy by no more
    than ``energy_tol`` relative to the previous one.
    """
    if not graph.free_indices:
        raise GraphUnconstrainedError("Pose graph has no free node")

    samples = None
    if graph.lambda2 > 0:
        samples = [masked_points(n.frame, graph.gates.stride) for n in graph.nodes]
        build_dense_edges(graph, executor, samples)

    has_features = graph.lambda1 > 0 and any(
        len(e) for e in graph.feature_edges.values()
    )
    has_dense = graph.lambda2 > 0 and any(len(e) for e in graph.dense_edges.values())
    if not (has_features or has_dense):
        raise GraphUnconstrainedError("Pose graph has no correspondences")

    energy = total_energy(graph)
    result = OptimizeResult(graph.poses(), [energy])
    for it in range(1, gn_iters + 1):
        system = linearize(graph)
        if not np.any(system.gradient):
            break
        solve = pcg_solve(
            system.apply, -system.gradient, system.diagonal, pcg_tol, pcg_max_iter
        )
        result.degraded |= solve.degraded

        twists = graph.twists()
        dense_edges = graph.dense_edges
        scale, trial_energy = 1.0, None
        for _ in range(max_step_halvings + 1):
            graph.set_twists(_step(twists, system.column, solve.x, scale))
            trial_energy = total_energy(graph)
            if trial_energy.total <= energy.total:
                break
            scale *= 0.5
            trial_energy = None

        if trial_energy is None:
            graph.set_twists(twists)
            graph.dense_edges = dense_edges
            logger.debug("GN iteration %d: no descent step, stopping", it)
            break
        if samples is not None:
            build_dense_edges(graph, executor, samples)
            trial_energy = total_energy(graph)
            if trial_energy.total > energy.total:
                graph.set_twists(twists)
                graph.dense_edges = dense_edges
                logger.debug("GN iteration %d: re-association raised the energy", it)
                break
        converged = energy.total - trial_energy.total <= energy_tol * energy.total
        energy = trial_energy
        result.energies.append(energy)
        result.accepted_steps += 1
        logger.debug(
            "GN iteration %d: E_f=%.6g E_g=%.6g E=%.6g (step scale %g, %d PCG its)",
            it,
            energy.feature,
            energy.geometric,
            energy.total,
            scale,
            solve.iterations,
        )
        if converged:
            logger.debug("GN iteration %d: converged", it)
            break

    result.poses = graph.poses()
    return result

