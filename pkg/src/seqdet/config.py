"""Run configuration: one YAML file with model/training/augmentation/decode/data sections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentConfig
from .codec import Vocabulary
from .data import DataConfig, SyntheticConfig
from .infer import DecodeConfig
from .model import ModelConfig, TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "training": TrainConfig,
    "augmentation": AugmentConfig,
    "decode": DecodeConfig,
    "data": DataConfig,
}


def _default_model() -> ModelConfig:
    data, aug, dec = DataConfig(), AugmentConfig(), DecodeConfig()
    return ModelConfig(
        vocab_size=Vocabulary(data.n_bins, data.synthetic.n_classes).size,
        max_target_len=5 * max(aug.total_objects, dec.max_objects) + 1,
    )


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=_default_model)
    training: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        vocab = self.vocab
        if self.model.vocab_size != vocab.size:
            raise ValueError(
                f"model.vocab_size={self.model.vocab_size} but n_bins={self.data.n_bins} and "
                f"n_classes={self.data.synthetic.n_classes} give {vocab.size}"
            )
        need = 5 * max(self.augmentation.total_objects, self.decode.max_objects) + 1
        if self.model.max_target_len < need:
            raise ValueError(f"model.max_target_len={self.model.max_target_len} < required {need}")
        if self.augmentation.total_objects < self.data.synthetic.max_objects:
            raise ValueError("augmentation.total_objects is below data max_objects")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.data.n_bins, self.data.synthetic.n_classes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        return {name: _plain(out[name]) for name in SECTIONS}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        raw = raw or {}
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, klass in SECTIONS.items():
            values = dict(raw.get(name) or {})
            _check_fields(klass, values, name)
            if name == "data" and isinstance(values.get("synthetic"), dict):
                _check_fields(SyntheticConfig, values["synthetic"], "data.synthetic")
            sections[name] = values
        data = DataConfig(**sections["data"])
        aug = AugmentConfig(**sections["augmentation"])
        dec = DecodeConfig(**sections["decode"])
        model_vals = sections["model"]
        model_vals.setdefault("vocab_size", Vocabulary(data.n_bins, data.synthetic.n_classes).size)
        model_vals.setdefault("max_target_len", 5 * max(aug.total_objects, dec.max_objects) + 1)
        return cls(
            model=ModelConfig(**model_vals),
            training=TrainConfig(**sections["training"]),
            augmentation=aug,
            decode=dec,
            data=data,
        )

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Apply dotted-key overrides, e.g. {"training.seed": 3}."""
        raw = self.to_dict()
        for key, value in overrides.items():
            node = raw
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ValueError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        # derived sizes follow the new data/augment settings unless set explicitly
        for k in ("vocab_size", "max_target_len"):
            if f"model.{k}" not in overrides:
                raw["model"].pop(k)
        return RunConfig.from_dict(raw)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _check_fields(klass, values: dict, where: str) -> None:
    names = {f.name for f in dataclasses.fields(klass) if f.init}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"[{where}] unknown fields: {sorted(unknown)}")


def toy_config(overrides: dict[str, Any] | None = None) -> RunConfig:
    """Desk-scale synthetic-shapes setup: 64x64 canvases, 1-5 shapes, 3 classes.

    About 25 CPU-minutes of training on one core.
    """
    raw = {
        "model": dict(
            image_size=64, patch_size=8, d_model=128, n_heads=4, d_ffn=512,
            n_encoder_layers=3, n_decoder_layers=3, dropout_rate=0.0,
        ),
        "training": dict(
            learning_rate=1e-3, weight_decay=0.05, warmup_epochs=1, epochs=22,
            batch_size=32, two_views_per_image=False, seed=0,
        ),
        "augmentation": dict(total_objects=10, scale_range=[0.75, 1.25], crop_size=64),
        "decode": dict(max_objects=10, mode="nucleus", p=0.4),
        # 65 bins put bin edges on pixel edges of the 64-pixel canvas
        "data": dict(n_bins=65, ordering="dist2ori", val_size=500, synthetic=dict(dataset_size=5000)),
    }
    cfg = RunConfig.from_dict(raw)
    return cfg.with_overrides(overrides) if overrides else cfg


def ablation_config(overrides: dict[str, Any] | None = None) -> RunConfig:
    """The toy setup on a shorter schedule, for experiments that need many runs."""
    cfg = toy_config({"training.epochs": 8})
    return cfg.with_overrides(overrides) if overrides else cfg
