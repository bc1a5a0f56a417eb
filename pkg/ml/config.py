from __future__ import annotations

import hashlib
import os
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Dict, List, Mapping, Optional, Union

from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    ValidationError,
    model_validator,
)

from ml.autodiff.ops import ActivationKind
from ml.errors import ConfigError

OUTPUT_ENV_VAR = "TEDK_OUT"


class MixerKind(str, Enum):
    UWF = "uwf"  # uniformly weighted fusion
    CGF = "cgf"  # confidence-guided fusion
    CBF = "cbf"  # concatenation-based fusion
    RBF = "rbf"  # ranking-based (ConvGRU) fusion


class FusionLocation(str, Enum):
    PENULTIMATE = "pl"
    FINAL = "fl"


class PrimitiveKind(str, Enum):
    PLANE = "plane"
    BOX = "box"
    SPHERE = "sphere"


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


IntList = Annotated[List[int], BeforeValidator(_split_csv)]
FloatList = Annotated[List[float], BeforeValidator(_split_csv)]
PrimitiveList = Annotated[List[PrimitiveKind], BeforeValidator(_split_csv)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class PredictorArch(_Section):
    depth: int = Field(default=2, ge=1, description="Number of conv blocks")
    width: int = Field(default=8, ge=1, description="Channels per block")
    dilation: IntList = Field(default_factory=lambda: [1], description="Per-block dilation")
    activation: ActivationKind = Field(default=ActivationKind.ELU)

    @model_validator(mode="after")
    def _check_dilation(self) -> "PredictorArch":
        if any(d < 1 for d in self.dilation):
            raise ValueError("dilation factors must be >= 1")
        if len(self.dilation) not in (1, self.depth):
            raise ValueError(f"dilation needs 1 or {self.depth} entries, got {len(self.dilation)}")
        return self

    def dilations(self) -> List[int]:
        """Dilation of each block, broadcasting a single factor."""
        return list(self.dilation) * self.depth if len(self.dilation) == 1 else list(self.dilation)


class ModelConfig(_Section):
    feature_channels: int = Field(default=8, ge=1, description="Penultimate channels C_f")
    kappa: float = Field(default=10.0, gt=0, description="Depth scale of the sigmoid head")


class SsiLossConfig(_Section):
    alpha: float = Field(default=10.0, gt=0)
    eta: float = Field(default=0.85, ge=0, le=1)


class TrainConfig(_Section):
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=4, ge=1)
    base_lr: float = Field(default=1e-4, gt=0)
    power: float = Field(default=0.9, ge=0)
    weight_decay: float = Field(default=0.01, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-6, gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    loss: SsiLossConfig = Field(default_factory=SsiLossConfig)


class SceneConfig(_Section):
    count: int = Field(default=240, ge=1, description="Training samples")
    test_count: int = Field(default=40, ge=0, description="Held-out test samples")
    height: int = Field(default=32, ge=4)
    width: int = Field(default=32, ge=4)
    max_depth: float = Field(default=10.0, gt=0)
    primitives: PrimitiveList = Field(
        default_factory=lambda: [PrimitiveKind.PLANE, PrimitiveKind.BOX, PrimitiveKind.SPHERE]
    )
    max_primitives: int = Field(default=4, ge=0)
    focal_scale: float = Field(default=1.0, gt=0, description="Focal length in image widths")
    albedo_min: float = Field(default=0.2, ge=0, le=1)
    albedo_max: float = Field(default=1.0, ge=0, le=1)
    seed: int = Field(default=0, ge=0, lt=2**64)


class ShiftConfig(_Section):
    """Overrides that produce a differently distributed evaluation split."""

    enabled: bool = False
    count: int = Field(default=40, ge=1)
    focal_scale: float = Field(default=0.7, gt=0)
    primitives: PrimitiveList = Field(
        default_factory=lambda: [PrimitiveKind.BOX, PrimitiveKind.SPHERE]
    )
    albedo_min: float = Field(default=0.4, ge=0, le=1)
    albedo_max: float = Field(default=0.9, ge=0, le=1)
    seed_offset: int = Field(default=7919, ge=1)


class CameraIntrinsics(_Section):
    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float

    @classmethod
    def for_image(cls, height: int, width: int, focal_scale: float = 1.0) -> "CameraIntrinsics":
        focal = focal_scale * width
        return cls(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)


class AugmentationPolicy(_Section):
    enabled: bool = True
    flip_prob: float = Field(default=0.5, ge=0, le=1)
    rotation_degrees: float = Field(default=2.5, ge=0)
    crop_height: Optional[int] = Field(default=None, ge=1)
    crop_width: Optional[int] = Field(default=None, ge=1)
    photometric_prob: float = Field(default=0.5, ge=0, le=1)
    photometric_range: float = Field(default=0.1, ge=0, lt=1)


class MixerConfig(_Section):
    kind: MixerKind = MixerKind.RBF
    location: FusionLocation = FusionLocation.PENULTIMATE
    average: bool = Field(default=False, description="Divide the uniform sum by K")
    subset: Optional[IntList] = Field(default=None, description="Predictor indices to fuse")
    order: Optional[IntList] = Field(default=None, description="Explicit RBF order")
    base_lr: Optional[float] = Field(default=None, gt=0)
    epochs: Optional[int] = Field(default=None, ge=1)
    warm_start: bool = Field(default=True, description="Fit the head by least squares first")
    ridge_alpha: float = Field(default=1.0, ge=0, description="L2 penalty of the head fit")
    holdout: float = Field(
        default=0.25, ge=0, lt=1, description="Share of the mixer split kept for epoch selection"
    )


class EvalConfig(_Section):
    min_depth: float = Field(default=1e-3, gt=0)
    max_depth: Optional[float] = Field(default=None, gt=0, description="Defaults to kappa")
    caps: FloatList = Field(default_factory=list)


class TrackingConfig(_Section):
    enabled: bool = False
    uri: Optional[str] = None
    experiment: str = "tedepth"


def _default_archs() -> List[PredictorArch]:
    return [
        PredictorArch(depth=2, width=8, dilation=[1], activation=ActivationKind.ELU),
        PredictorArch(depth=3, width=8, dilation=[1, 2, 4], activation=ActivationKind.ELU),
        PredictorArch(depth=2, width=6, dilation=[2], activation=ActivationKind.TANH),
    ]


class ExperimentConfig(_Section):
    run_name: str = "desk"
    output_dir: str = "runs"
    jobs: int = Field(default=1, ge=1)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    shift: ShiftConfig = Field(default_factory=ShiftConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    predictor: List[PredictorArch] = Field(default_factory=_default_archs, min_length=1)
    train: TrainConfig = Field(default_factory=TrainConfig)
    mixer: MixerConfig = Field(default_factory=MixerConfig)
    augment: AugmentationPolicy = Field(default_factory=AugmentationPolicy)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_name

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics.for_image(
            self.scene.height, self.scene.width, self.scene.focal_scale
        )

    def eval_cap(self) -> tuple:
        return (self.eval.min_depth, self.eval.max_depth or self.model.kappa)


def _insert(tree: Dict[str, Any], dotted: str, value: str, line_no: int) -> None:
    parts = dotted.split(".")
    if any(not p for p in parts):
        raise ConfigError(f"line {line_no}: malformed key '{dotted}'")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"line {line_no}: '{dotted}' nests under a scalar key")
        node = child
    if parts[-1] in node:
        raise ConfigError(f"line {line_no}: duplicate key '{dotted}'")
    node[parts[-1]] = value


def _listify(node: Any) -> Any:
    if not isinstance(node, dict):
        return node
    converted = {key: _listify(value) for key, value in node.items()}
    if converted and all(key.isdigit() for key in converted):
        indices = sorted(int(key) for key in converted)
        if indices != list(range(len(indices))):
            raise ConfigError(f"list indices must be contiguous from 0, got {indices}")
        return [converted[str(i)] for i in indices]
    return converted


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse `key = value` lines (dotted keys, # comments) into an ExperimentConfig."""
    tree: Dict[str, Any] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        _insert(tree, key, value, line_no)
    return config_from_mapping(_listify(tree))


def config_from_mapping(data: Mapping[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def _flatten(prefix: str, value: Any, out: Dict[str, str]) -> None:
    if isinstance(value, dict):
        for key, item in value.items():
            _flatten(f"{prefix}.{key}" if prefix else key, item, out)
    elif isinstance(value, list) and value and isinstance(value[0], dict):
        for index, item in enumerate(value):
            _flatten(f"{prefix}.{index}", item, out)
    elif isinstance(value, list):
        out[prefix] = ",".join(_scalar(v) for v in value)
    elif value is not None:
        out[prefix] = _scalar(value)


def _scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def flatten_config(cfg: ExperimentConfig) -> Dict[str, str]:
    out: Dict[str, str] = {}
    _flatten("", cfg.model_dump(mode="json"), out)
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize to the config grammar with sorted keys; parsing it gives an equal config."""
    flat = flatten_config(cfg)
    return "".join(f"{key} = {flat[key]}\n" for key in sorted(flat))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()


def apply_overrides(cfg: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """Return a copy of cfg with dotted keys replaced (values in config-file syntax)."""
    if not overrides:
        return cfg
    flat = flatten_config(cfg)
    for key, value in overrides.items():
        if value is None:
            continue
        flat[key] = _scalar(value) if not isinstance(value, (list, tuple)) else ",".join(
            _scalar(v) for v in value
        )
    text = "".join(f"{key} = {flat[key]}\n" for key in sorted(flat))
    return parse_config_text(text)


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """Defaults < config file < overrides < TEDK_OUT (output directory only)."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"Cannot read config file {path}: {exc}") from exc
        cfg = parse_config_text(text)
    cfg = apply_overrides(cfg, overrides or {})
    env_out = os.environ.get(OUTPUT_ENV_VAR)
    if env_out:
        cfg = cfg.model_copy(update={"output_dir": env_out})
    return cfg
