"""Pipeline configuration, stored as JSON."""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from spsmask.errors import InputError

MODULES = ("mlp", "conv", "deform", "sfm")
N_REFINE_STAGES = 3
ROI_GRID = 14


@dataclass(frozen=True)
class PipelineConfig:
    """Head hyper-parameters.

    ``top_k`` is the number of parent cells selected per stage across all RoIs
    of an image; ``None`` selects every cell.
    """

    top_k: int | None = 10000
    module: str = "sfm"
    feature_size: int = 256
    backbone_channels: int = 256
    backbone_reduce: bool = False
    mask_threshold: float = 0.5
    seed: int = 0
    init_scale: float = 0.05

    def __post_init__(self):
        if self.module not in MODULES:
            raise InputError(f"module must be one of {MODULES}, got {self.module!r}")
        if self.top_k is not None and self.top_k < 0:
            raise InputError(f"top_k must be >= 0 or null, got {self.top_k}")
        f = self.feature_size
        if f < 8 or f % 2**N_REFINE_STAGES:
            raise InputError(
                f"feature_size {f} must be a positive multiple of {2**N_REFINE_STAGES} "
                "so it can be halved at every refinement stage"
            )
        if self.backbone_channels < 1:
            raise InputError("backbone_channels must be >= 1")
        if not 0.0 < self.mask_threshold < 1.0:
            raise InputError("mask_threshold must lie in (0, 1)")

    def stage_features(self, s):
        return self.feature_size // 2**s

    def replace(self, **changes):
        data = asdict(self)
        data.update(changes)
        return PipelineConfig(**data)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def load_config(path=None):
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    return PipelineConfig.from_dict(data)


def save_config(config, path):
    Path(path).write_text(config.to_json())
