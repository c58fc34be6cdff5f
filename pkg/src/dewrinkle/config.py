"""Run configuration: one YAML file with a section per component."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import AugmentConfig
from .losses import LossWeights
from .maskgen import MaskPolicy
from .pipeline import PipelineOptions
from .segnet import SegTrainConfig
from .trainer_inpaint import InpaintTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_root: str = ""
    val_root: str | None = None
    eval_root: str | None = None
    val_fraction: float = 0.0


@dataclass
class RunConfig:
    """Everything a command needs. The top-level ``seed`` overrides the per-section seeds."""

    data: DataConfig = field(default_factory=DataConfig)
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    inpaint: InpaintTrainConfig = field(default_factory=InpaintTrainConfig)
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy)
    weights: LossWeights = field(default_factory=LossWeights)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self) -> None:
        self.propagate()

    def propagate(self) -> None:
        self.seg.seed = self.seed
        self.inpaint.seed = self.seed
        self.inpaint.mask_policy = self.mask_policy
        self.inpaint.weights = self.weights

    def seg_checkpoint(self) -> Path:
        """Segmentation checkpoint the inpainting stage loads; defaults to ``<output_dir>/seg.pt``."""
        return Path(self.inpaint.seg_checkpoint or Path(self.output_dir) / "seg.pt")

    def to_dict(self) -> dict[str, Any]:
        def plain(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, (list, tuple)):
                return [plain(v) for v in obj]
            return obj

        out = plain(self)
        out["pipeline"].pop("mask_override", None)
        for k in ("seed", "mask_policy", "weights"):
            out["inpaint"].pop(k, None)
        out["seg"].pop("seed", None)
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, section: dict | None, name: str, **forced):
    section = dict(section or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    section.update(forced)
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    raw = dict(raw or {})
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = int(raw.get("seed", 0))
    seg_raw = dict(raw.get("seg") or {})
    if isinstance(seg_raw.get("augment"), dict):
        seg_raw["augment"] = _build(AugmentConfig, seg_raw["augment"], "seg.augment")
    inpaint_raw = dict(raw.get("inpaint") or {})
    if isinstance(inpaint_raw.get("augment"), dict):
        inpaint_raw["augment"] = _build(AugmentConfig, inpaint_raw["augment"], "inpaint.augment")
    policy = _build(MaskPolicy, raw.get("mask_policy"), "mask_policy")
    weights = _build(LossWeights, raw.get("weights"), "weights")
    return RunConfig(
        data=_build(DataConfig, raw.get("data"), "data"),
        seg=_build(SegTrainConfig, seg_raw, "seg", seed=seed),
        inpaint=_build(InpaintTrainConfig, inpaint_raw, "inpaint", seed=seed, mask_policy=policy, weights=weights),
        mask_policy=policy,
        weights=weights,
        pipeline=_build(PipelineOptions, raw.get("pipeline"), "pipeline"),
        output_dir=str(raw.get("output_dir", "runs/default")),
        seed=seed,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw or {})


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(cfg.dump(), encoding="utf-8")
