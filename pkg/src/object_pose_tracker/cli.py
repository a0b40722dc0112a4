"""Command-line entry points: ``track``, ``synth`` and ``eval``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 tracking finished with at least one coasted frame.
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NoReturn, Optional

import numpy as np

from object_pose_tracker import __version__
from object_pose_tracker.config import RunConfig, dump_run_config, load_run_config
from object_pose_tracker.dataset import (
    BBOX_FILE,
    MODEL_FILE,
    Dataset,
    read_bbox,
    read_ground_truth,
    read_model_points,
    read_pose_log,
    write_energy_log,
    write_pose_log,
    write_scene,
    write_timing_log,
)
from object_pose_tracker.errors import ConfigError, TrackerError
from object_pose_tracker.evaluation import (
    MetricReport,
    evaluate_sequence,
    write_curves,
    write_drift,
    write_metrics,
)
from object_pose_tracker.features import (
    HarrisSiftDetector,
    KeypointFileProvider,
    KeypointProvider,
)
from object_pose_tracker.segmentation import (
    FileMaskProvider,
    MaskProvider,
    PlaneRemovalMaskProvider,
)
from object_pose_tracker.synthetic import standard_benchmarks
from object_pose_tracker.tracker import TrackedPose, Tracker

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DEGRADED = 3

SCENES = (
    "ORBIT",
    "MANIPULATE",
    "DROPPED",
    "PERTURBED",
    "SENSITIVE",
    "SYMMETRIC",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


@dataclass(frozen=True)
class TrackRun:
    outputs: tuple[TrackedPose, ...]
    degraded: bool
    out_dir: Path


def _keypoint_provider(config: RunConfig, dataset: Dataset) -> KeypointProvider:
    choice = config.features.provider
    if choice == "files" or (choice == "auto" and dataset.has_keypoints()):
        logger.info("using precomputed keypoint files")
        return KeypointFileProvider(dataset.directory)
    return HarrisSiftDetector(config.features.n_keypoints)


def _mask_provider(config: RunConfig, dataset: Dataset) -> MaskProvider:
    if config.segmentation.mode == "plane_removal":
        return PlaneRemovalMaskProvider(config.segmentation, config.seed)
    return FileMaskProvider(dataset.directory)


def cmd_track(dataset_dir: Path, config: RunConfig, out_dir: Path) -> TrackRun:
    """Track every frame of a dataset and write poses and diagnostics."""
    dataset = Dataset(dataset_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pose0 = dataset.init_pose()
    with Tracker(
        config.tracker_config(),
        keypoint_provider=_keypoint_provider(config, dataset),
        mask_provider=_mask_provider(config, dataset),
        threads=config.threads,
    ) as tracker:
        try:
            outputs = tracker.track(dataset.observations(), pose0)
        finally:
            # whatever was emitted before a data error is still written
            if tracker.state is not None:
                write_pose_log(out_dir / "poses.txt", tracker.state.outputs)
                write_energy_log(out_dir / "energy.csv", tracker.state.energy_log)
                write_timing_log(out_dir / "timing.csv", tracker.state.timings)
        assert tracker.state is not None
        degraded = tracker.state.degraded
    dump_run_config(config, out_dir / "config.yaml")
    coasted = sum(out.status == "coasted" for out in outputs)
    logger.info("%d frames tracked, %d coasted", len(outputs), coasted)
    return TrackRun(outputs, degraded, out_dir)


def cmd_synth(scene_name: str, out_dir: Path, seed: int = 0) -> Path:
    scenes = standard_benchmarks(seed)
    if scene_name not in scenes:
        raise UsageError(
            f"Unknown scene {scene_name!r}; choose from {', '.join(scenes)}"
        )
    return write_scene(scenes[scene_name], out_dir)


def cmd_eval(
    poses_path: Path,
    gt_dir: Path,
    out_dir: Path,
    model_file: Optional[Path] = None,
    bbox: Optional[Sequence[float]] = None,
    seed: int = 0,
) -> MetricReport:
    """Score a pose log against ground truth; writes metrics, curves and drift."""
    estimates = {r.frame_id: r.pose for r in read_pose_log(poses_path)}
    ground_truth = read_ground_truth(gt_dir)
    missing_gt = sorted(set(estimates) - set(ground_truth))
    missing_est = sorted(set(ground_truth) - set(estimates))
    if not set(estimates) & set(ground_truth):
        raise TrackerError(f"No frame ids shared by {poses_path} and {gt_dir}")
    if missing_gt or missing_est:
        raise TrackerError(
            f"Frame ids differ: missing ground truth for {missing_gt}, "
            f"missing estimates for {missing_est}"
        )

    model = read_model_points(model_file or gt_dir / MODEL_FILE)
    if bbox is not None:
        dims = np.asarray(bbox, dtype=float)
    elif (gt_dir / BBOX_FILE).exists():
        dims = read_bbox(gt_dir / BBOX_FILE)
    else:
        dims = np.ptp(model.points, axis=0)
    report = evaluate_sequence(estimates, ground_truth, model, dims, seed)

    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(out_dir / "metrics.txt", report)
    write_curves(out_dir / "curves.csv", report)
    write_drift(out_dir / "drift.csv", report)
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="object-pose-tracker",
        description="Model-free 6D object pose tracking on RGB-D sequences.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(
        dest="command", required=True, parser_class=_Parser
    )

    track = commands.add_parser("track", help="track an object through a dataset")
    track.add_argument("dataset", type=Path)
    track.add_argument("--config", type=Path, help="YAML run config")
    track.add_argument("--seed", type=int, help="override the config seed")
    track.add_argument("--out", type=Path, required=True)

    synth = commands.add_parser("synth", help="write a synthetic benchmark dataset")
    synth.add_argument("scene", help=f"one of {', '.join(SCENES)}")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", type=Path, required=True)

    evaluate = commands.add_parser("eval", help="score a pose log against ground truth")
    evaluate.add_argument("poses", type=Path)
    evaluate.add_argument("gt_dir", type=Path)
    evaluate.add_argument("--model", type=Path, help="model points (x y z per line)")
    evaluate.add_argument(
        "--bbox", type=float, nargs=3, metavar=("DX", "DY", "DZ")
    )
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument("--out", type=Path, required=True)
    return parser


def _run(args: argparse.Namespace) -> int:
    if args.command == "track":
        config = load_run_config(args.config)
        if args.seed is not None:
            config = config.model_copy(update={"seed": args.seed})
        run = cmd_track(args.dataset, config, args.out)
        return EXIT_DEGRADED if run.degraded else EXIT_OK
    if args.command == "synth":
        cmd_synth(args.scene, args.out, args.seed)
        return EXIT_OK
    report = cmd_eval(
        args.poses, args.gt_dir, args.out, args.model, args.bbox, args.seed
    )
    logger.info("5deg5cm %.1f%%, ADD AUC %.3f", report.five_deg_five_cm, report.add_auc)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"object-pose-tracker: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)
    try:
        return _run(args)
    except (UsageError, ConfigError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except TrackerError as e:
        logger.error("%s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
