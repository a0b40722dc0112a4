"""Causal per-frame tracking: mask, features, registration, keyframes, pose graph."""

import logging
import time
import warnings
from collections.abc import Iterable, Iterator
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from typing import Literal, Optional

import numpy as np

from object_pose_tracker.config import TrackerConfig, resolve_thread_count
from object_pose_tracker.errors import (
    EmptyMaskError,
    GraphUnconstrainedError,
    InitializationError,
    RegistrationFailure,
    SequencingError,
    TrackingDegradedWarning,
)
from object_pose_tracker.features import (
    HarrisSiftDetector,
    KeypointProvider,
    coarse_pose,
    match_descriptors,
    ransac_register,
)
from object_pose_tracker.frame import Frame, Observation, ingest
from object_pose_tracker.geometry import Pose
from object_pose_tracker.keyframes import (
    MemoryPool,
    maybe_add_keyframe,
    select_keyframes,
)
from object_pose_tracker.pose_graph import (
    CorrespondenceCache,
    DenseGates,
    HuberParams,
    PoseGraph,
    build_feature_edges,
    optimize,
)
from object_pose_tracker.pose_graph.edges import pair_seed
from object_pose_tracker.segmentation import MaskProvider

logger = logging.getLogger(__name__)

Status = Literal["ok", "coasted"]


@dataclass(frozen=True, eq=False)
class TrackedPose:
    frame_id: int
    pose: Pose
    status: Status = "ok"


@dataclass(frozen=True)
class EnergyRecord:
    frame_id: int
    iter: int
    E_f: float
    E_g: float
    E_total: float


@dataclass
class StageTiming:
    """Per-stage wall time of one frame in milliseconds."""

    frame_id: int
    segmentation: float = 0.0
    features: float = 0.0
    registration: float = 0.0
    keyframe_selection: float = 0.0
    pose_graph: float = 0.0
    pool_update: float = 0.0

    @property
    def total(self) -> float:
        return sum(getattr(self, f.name) for f in fields(self)[1:])

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = (time.perf_counter() - start) * 1000.0
            setattr(self, name, getattr(self, name) + elapsed)


@dataclass(eq=False)
class TrackerState:
    """Everything carried between frames.

    Emitted poses are append-only; keyframe poses inside the pool may still
    be refined by later optimizations.
    """

    pool: MemoryPool
    cache: CorrespondenceCache
    last_frame: Frame
    last_pose: Pose
    last_id: int
    _outputs: list[TrackedPose] = field(default_factory=list)
    energy_log: list[EnergyRecord] = field(default_factory=list)
    timings: list[StageTiming] = field(default_factory=list)

    @property
    def outputs(self) -> tuple[TrackedPose, ...]:
        return tuple(self._outputs)

    @property
    def degraded(self) -> bool:
        return any(out.status == "coasted" for out in self._outputs)

    def emit(self, record: TrackedPose) -> None:
        self._outputs.append(record)


class Tracker:
    """Model-free pose tracker over a causal frame stream.

    Masks are either passed in per frame or pulled from ``mask_provider``.
    """

    def __init__(
        self,
        config: Optional[TrackerConfig] = None,
        keypoint_provider: Optional[KeypointProvider] = None,
        mask_provider: Optional[MaskProvider] = None,
        threads: Optional[int] = None,
    ):
        self.config = config or TrackerConfig()
        self.keypoint_provider = keypoint_provider or HarrisSiftDetector(
            self.config.features.n_keypoints
        )
        self.mask_provider = mask_provider
        self.threads = resolve_thread_count(threads)
        self._executor = ThreadPoolExecutor(max_workers=self.threads)
        self.state: Optional[TrackerState] = None

    def close(self) -> None:
        self._executor.shutdown(wait=True)

    def __enter__(self) -> "Tracker":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _acquire_mask(
        self, observation: Observation, mask: Optional[np.ndarray]
    ) -> Optional[np.ndarray]:
        if mask is None:
            if self.mask_provider is None:
                raise ValueError("No mask given and no mask provider configured")
            try:
                mask = self.mask_provider.get_mask(
                    observation.id, observation.depth, observation.intrinsics
                )
            except EmptyMaskError as e:
                logger.info("frame %d: %s", observation.id, e)
                return None
        mask = np.asarray(mask, dtype=bool)
        return mask if mask.any() else None

    def initialize(
        self, observation: Observation, pose0: Pose, mask: Optional[np.ndarray] = None
    ) -> TrackerState:
        """Start tracking from ``pose0``; the first frame becomes the fixed keyframe."""
        if self.state is not None:
            raise InitializationError(
                "Tracker is already initialized; re-initialization is not allowed"
            )
        timing = StageTiming(observation.id)
        with timing.stage("segmentation"):
            mask = self._acquire_mask(observation, mask)
        if mask is None:
            raise InitializationError(
                f"Initial mask of frame {observation.id} is empty"
            )

        with timing.stage("features"):
            frame = ingest(
                observation.color,
                observation.depth,
                mask,
                observation.intrinsics,
                observation.id,
                pose0,
            )
            if frame.valid_count == 0:
                raise InitializationError(
                    f"Initial mask of frame {observation.id} has no valid depth"
                )
            frame.keypoints = self.keypoint_provider.detect(frame)

        pool = MemoryPool()
        with timing.stage("pool_update"):
            maybe_add_keyframe(pool, frame, pose0, self.config.novelty_threshold)
        self.state = TrackerState(
            pool=pool,
            cache=CorrespondenceCache(),
            last_frame=frame,
            last_pose=pose0,
            last_id=observation.id,
        )
        self.state.emit(TrackedPose(observation.id, pose0))
        self.state.timings.append(timing)
        logger.info(
            "initialized at frame %d with %d keypoints",
            observation.id,
            len(frame.keypoints),
        )
        return self.state

    def _coast(self, state: TrackerState, frame_id: int, reason: str) -> Pose:
        warnings.warn(
            f"Frame {frame_id}: {reason}; keeping the previous pose",
            TrackingDegradedWarning,
            stacklevel=3,
        )
        state.emit(TrackedPose(frame_id, state.last_pose, "coasted"))
        state.last_id = frame_id
        return state.last_pose

    def _register(self, state: TrackerState, frame: Frame) -> Pose:
        """Coarse pose from the previous frame; raises RegistrationFailure."""
        prev = state.last_frame
        ransac = self.config.ransac
        matches = match_descriptors(
            prev.keypoints, frame.keypoints, self.config.features.ratio_test
        )
        reg = ransac_register(
            matches,
            prev.keypoints,
            frame.keypoints,
            delta=ransac.delta,
            alpha=ransac.alpha,
            iterations=ransac.iterations,
            seed=pair_seed(self.config.seed, prev.id, frame.id),
            early_exit_ratio=ransac.early_exit_ratio,
        )
        state.cache.put(prev.id, frame.id, reg.inliers)
        logger.debug(
            "frame %d: %d matches, %d inliers against frame %d",
            frame.id,
            len(matches),
            reg.inlier_count,
            prev.id,
        )
        return coarse_pose(state.last_pose, reg)

    def _optimize(
        self,
        state: TrackerState,
        keyframes: list[Frame],
        frame: Frame,
        coarse: Pose,
        timing: StageTiming,
    ) -> Pose:
        config = self.config
        graph = PoseGraph.from_frames(
            [*keyframes, frame],
            [*(kf.pose for kf in keyframes), coarse],
            fixed_id=state.pool.initial.id,
            lambda1=config.effective_lambda1,
            lambda2=config.effective_lambda2,
            huber=HuberParams.from_config(config.huber),
            gates=DenseGates.from_config(config.solver),
        )
        with timing.stage("pose_graph"):
            if graph.lambda1 > 0:
                build_feature_edges(
                    graph,
                    state.cache,
                    config.ransac,
                    config.features.ratio_test,
                    config.seed,
                    self._executor,
                )
            try:
                result = optimize(
                    graph,
                    gn_iters=config.solver.gn_iters,
                    pcg_tol=config.solver.pcg_tol,
                    pcg_max_iter=config.solver.pcg_max_iter,
                    max_step_halvings=config.solver.max_step_halvings,
                    energy_tol=config.solver.energy_tol,
                    executor=self._executor,
                )
            except GraphUnconstrainedError as e:
                logger.info("frame %d: pose graph skipped (%s)", frame.id, e)
                return coarse

        for k, energy in enumerate(result.energies):
            state.energy_log.append(
                EnergyRecord(
                    frame.id, k, energy.feature, energy.geometric, energy.total
                )
            )
        with timing.stage("pool_update"):
            for node in graph.nodes[:-1]:
                if not node.fixed:
                    state.pool.update_pose(node.frame.id, node.pose)
        return graph.nodes[-1].pose

    def process_frame(
        self, observation: Observation, mask: Optional[np.ndarray] = None
    ) -> Pose:
        """Track one frame and emit its pose. Frame ids must increase."""
        state = self.state
        if state is None:
            raise InitializationError("Tracker has not been initialized")
        if observation.id <= state.last_id:
            raise SequencingError(
                f"Frame {observation.id} arrived after frame {state.last_id}"
            )
        timing = StageTiming(observation.id)
        state.timings.append(timing)

        with timing.stage("segmentation"):
            mask = self._acquire_mask(observation, mask)
        if mask is None:
            return self._coast(state, observation.id, "empty mask")

        with timing.stage("features"):
            frame = ingest(
                observation.color,
                observation.depth,
                mask,
                observation.intrinsics,
                observation.id,
            )
            if frame.valid_count == 0:
                return self._coast(state, observation.id, "no valid depth in mask")
            frame.keypoints = self.keypoint_provider.detect(frame)

        status: Status = "ok"
        with timing.stage("registration"):
            try:
                coarse = self._register(state, frame)
            except RegistrationFailure as e:
                warnings.warn(
                    f"Frame {frame.id}: registration failed ({e}); "
                    "using the previous pose as initial guess",
                    TrackingDegradedWarning,
                    stacklevel=2,
                )
                coarse, status = state.last_pose, "coasted"
        frame.pose = coarse

        if self.config.disable_pose_graph:
            pose = coarse
        else:
            with timing.stage("keyframe_selection"):
                keyframes = select_keyframes(
                    state.pool, frame, self.config.max_keyframes
                )
            pose = self._optimize(state, keyframes, frame, coarse, timing)

        with timing.stage("pool_update"):
            maybe_add_keyframe(state.pool, frame, pose, self.config.novelty_threshold)
            state.cache.retain(state.pool.ids)
        frame.pose = pose

        state.emit(TrackedPose(frame.id, pose, status))
        state.last_frame, state.last_pose, state.last_id = frame, pose, frame.id
        logger.debug(
            "frame %d tracked (%s) in %.1f ms", frame.id, status, timing.total
        )
        return pose

    def track(
        self, observations: Iterable[Observation], pose0: Pose
    ) -> tuple[TrackedPose, ...]:
        """Initialize on the first observation and process the rest in order."""
        stream = iter(observations)
        try:
            first = next(stream)
        except StopIteration:
            raise InitializationError("Sequence has no frames") from None
        self.initialize(first, pose0)
        for observation in stream:
            self.process_frame(observation)
        assert self.state is not None
        logger.info(
            "tracked %d frames, pool size %d",
            len(self.state.outputs),
            len(self.state.pool),
        )
        return self.state.outputs
