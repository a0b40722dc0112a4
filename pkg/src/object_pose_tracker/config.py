import math
import os
import re
import warnings
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import (
    AliasChoices,
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    model_validator,
)

from object_pose_tracker.errors import ConfigError

THREADS_ENV = "BT_THREADS"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class FeatureConfig(_Section):
    """Keypoint provider and matching settings."""

    provider: Literal["auto", "detector", "files"] = "auto"
    n_keypoints: int = Field(500, gt=0)
    ratio_test: float = Field(0.8, gt=0, le=1)


class RansacConfig(_Section):
    """Pairwise registration gates; 5 mm and 45 degrees by default."""

    delta: float = Field(0.005, gt=0)
    alpha_deg: float = Field(45.0, gt=0, le=180)
    iterations: int = Field(2000, gt=0)
    early_exit_ratio: float = Field(0.9, gt=0, le=1)

    @property
    def alpha(self) -> float:
        return math.radians(self.alpha_deg)


class HuberConfig(_Section):
    delta_feature: float = Field(0.005, gt=0)
    delta_geometric: float = Field(0.005, gt=0)


class SolverConfig(_Section):
    """Gauss-Newton, PCG and dense association settings."""

    gn_iters: int = Field(7, gt=0)
    pcg_tol: float = Field(1e-6, gt=0)
    pcg_max_iter: int = Field(100, gt=0)
    max_step_halvings: int = Field(5, ge=0)
    energy_tol: float = Field(1e-6, ge=0)
    dense_distance_gate: float = Field(0.02, gt=0)
    dense_angle_gate_deg: float = Field(45.0, gt=0, le=180)
    dense_stride: int = Field(1, gt=0)

    @property
    def dense_angle_gate(self) -> float:
        return math.radians(self.dense_angle_gate_deg)


class SegmentationConfig(_Section):
    """Mask provider selection; plane-removal parameters are tabletop scale."""

    mode: Literal["files", "plane_removal"] = "files"
    plane_inlier: float = Field(0.01, gt=0)
    plane_iterations: int = Field(500, gt=0)
    cluster_radius: float = Field(0.02, gt=0)
    min_cluster_size: int = Field(50, gt=0)


class TrackerConfig(_Section):
    """Tracker settings.

    ``max_keyframes`` is the pool selection cap; the novelty threshold is a
    rotation geodesic distance in degrees.
    """

    max_keyframes: int = Field(
        15, gt=0, validation_alias=AliasChoices("max_keyframes", "K")
    )
    novelty_threshold_deg: float = Field(10.0, gt=0)
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(1.0, ge=0)
    seed: int = Field(0, ge=0)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    ransac: RansacConfig = Field(default_factory=RansacConfig)
    huber: HuberConfig = Field(default_factory=HuberConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    disable_pose_graph: bool = False
    disable_feature_energy: bool = Field(
        False,
        validation_alias=AliasChoices("disable_feature_energy", "disable_E_f"),
    )
    disable_geometric_energy: bool = Field(
        False,
        validation_alias=AliasChoices("disable_geometric_energy", "disable_E_g"),
    )

    @model_validator(mode="after")
    def check_ablation(self) -> "TrackerConfig":
        if (
            not self.disable_pose_graph
            and self.disable_feature_energy
            and self.disable_geometric_energy
        ):
            raise ValueError(
                "disable_E_f and disable_E_g cannot both be set "
                "while the pose graph is enabled"
            )
        return self

    @property
    def novelty_threshold(self) -> float:
        return math.radians(self.novelty_threshold_deg)

    @property
    def effective_lambda1(self) -> float:
        return 0.0 if self.disable_feature_energy else self.lambda1

    @property
    def effective_lambda2(self) -> float:
        return 0.0 if self.disable_geometric_energy else self.lambda2


class RunConfig(TrackerConfig):
    """Everything ``track`` needs: tracker settings plus provider selection."""

    segmentation: SegmentationConfig = Field(default_factory=SegmentationConfig)
    threads: Optional[int] = Field(None, ge=0)

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig.model_validate(
            self.model_dump(exclude={"segmentation", "threads"})
        )


def _unflatten(data: dict[str, Any]) -> dict[str, Any]:
    """Turn dotted keys (``ransac.delta: 0.004``) into nested sections."""
    nested: dict[str, Any] = {}
    for key, value in data.items():
        parts = str(key).split(".")
        target = nested
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"Key {key!r} conflicts with a scalar setting")
        target[parts[-1]] = value
    return nested


_KEY_VALUE_LINE = re.compile(r"^(\s*)([\w.]+)\s*=\s*(.*)$")


def _as_yaml(text: str) -> str:
    """Rewrite flat ``key=value`` lines as ``key: value``; other lines pass through."""
    return "\n".join(
        _KEY_VALUE_LINE.sub(r"\1\2: \3", line) for line in text.splitlines()
    )


def _locate_key(text: str, key: str) -> Optional[int]:
    """1-based line of the first line that sets ``key``."""
    pattern = re.compile(rf"^\s*(?:[\w.]+\.)?{re.escape(key)}\s*[:=]")
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return number
    return None


def _describe(error: ValidationError, text: str, path: Path) -> str:
    messages = []
    for item in error.errors():
        key = str(item["loc"][-1]) if item["loc"] else ""
        line = _locate_key(text, key) if key else None
        where = f"{path}:{line}" if line else str(path)
        messages.append(f"{where}: {key or '<root>'}: {item['msg']}")
    return "Invalid config file " + "; ".join(messages)


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a run config; ``None`` means defaults.

    The file is YAML. Flat ``key=value`` lines are accepted as well and may be
    mixed with ``key: value`` lines.
    """
    if path is None:
        return RunConfig()

    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"No config file found at {config_path}")

    text = config_path.read_text()
    try:
        data = yaml.safe_load(_as_yaml(text))
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{config_path}:{mark.line + 1}" if mark else str(config_path)
        raise ConfigError(f"Error loading config file {where}: {e}") from e

    if data is None:
        warnings.warn(f"No settings found in {config_path}", stacklevel=2)
        return RunConfig()
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {config_path} must hold a key/value mapping")

    try:
        return RunConfig.model_validate(_unflatten(data))
    except ValidationError as e:
        raise ConfigError(_describe(e, text, config_path)) from e


def dump_run_config(config: RunConfig, path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config.model_dump(), f, sort_keys=True)


def resolve_thread_count(
    config_threads: Optional[int] = None, environ: Optional[Mapping[str, str]] = None
) -> int:
    """Worker threads: config value, else ``BT_THREADS``; 0 means one per CPU."""
    environ = os.environ if environ is None else environ
    requested = config_threads
    if requested is None:
        raw = environ.get(THREADS_ENV, "0")
        try:
            requested = int(raw)
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
        if requested < 0:
            raise ConfigError(f"{THREADS_ENV} must be >= 0, got {requested}")
    return requested or (os.cpu_count() or 1)
