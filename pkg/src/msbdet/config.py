"""Run configuration: one JSON document covering model, data, optimiser and seed."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .data_synth import PhantomSpec
from .detection_head import AnchorLayout
from .errors import ConfigError
from .fpn import BackboneConfig
from .model import DetectorConfig
from .msb import HdcConfig


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 2
    grad_clip: float | None = 10.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("learning_rate and epochs must be >= 0, batch_size >= 1")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(
        default_factory=lambda: BackboneConfig(stage_channels=(8, 16, 32, 64, 64), num_levels=5)
    )
    hdc: HdcConfig = field(default_factory=HdcConfig)
    anchors: AnchorLayout = field(default_factory=AnchorLayout)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: str = "fpn+msb"
    msb_input: str = "fused"
    gate_activation: str | None = "sigmoid"
    residual: bool = False
    head_channels: int = 32
    anchor_batch: int = 256  # anchors sampled per image for the loss
    nms_iou: float = 0.7
    max_detections: int = 50
    iou_thresh: float = 0.5  # detection-to-lesion matching in evaluation
    fp_rates: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    split_counts: dict[str, int] = field(default_factory=lambda: {"train": 200, "val": 0, "test": 200})
    dataset_dir: str | None = None
    seed: int = 0
    out_dir: str = "runs/default"
    gradcheck_precision: str = "float64"

    def __post_init__(self):
        if self.gradcheck_precision not in ("float64", "float32"):
            raise ConfigError("gradcheck_precision must be 'float64' or 'float32'")
        self.fp_rates = tuple(float(r) for r in self.fp_rates)
        self.detector()  # validates the model-related fields together

    def detector(self) -> DetectorConfig:
        return DetectorConfig(
            backbone=self.backbone,
            hdc=self.hdc,
            variant=self.model,
            msb_input=self.msb_input,
            gate_activation=self.gate_activation,
            residual=self.residual,
            anchors=self.anchors,
            head_channels=self.head_channels,
            anchor_batch=self.anchor_batch,
            nms_iou=self.nms_iou,
            max_detections=self.max_detections,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "backbone": BackboneConfig,
            "hdc": HdcConfig,
            "anchors": AnchorLayout,
            "optimizer": OptimizerConfig,
        }
        try:
            for key, typ in nested.items():
                if key in d and isinstance(d[key], Mapping):
                    d[key] = typ(**d[key])
            if "phantom" in d and isinstance(d["phantom"], Mapping):
                d["phantom"] = PhantomSpec.from_dict(d["phantom"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def desk_config(**overrides) -> RunConfig:
    """Small-image configuration used for the ablation: 128 px stacks, 1 mm per pixel."""
    base = dict(
        backbone=BackboneConfig(stage_channels=(8, 16, 32, 32, 32), num_levels=5, stem_channels=8,
                                pyramid_channels=16),
        hdc=HdcConfig(branch_channels=16),
        phantom=PhantomSpec(image_size=128, d_min_mm=6.0, d_max_mm=120.0, mm_per_pixel=1.0),
        head_channels=32,
    )
    base.update(overrides)
    return RunConfig(**base)
