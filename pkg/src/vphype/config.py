"""Run configuration: one JSON document bundling every section a command needs.

Schema (all sections optional, unknown keys rejected)::

    {
      "model":   {"preset": "tiny" | "default", ...ModelConfig fields},
      "prompts": {...PromptConfig fields},
      "train":   {...TrainConfig fields},
      "split":   {"train_fraction": 0.02, "seed": 0, "per_class_min": 1},
      "data":    {"scene": DIR, "prompt_bank": PATH | null, "task_id": 0, "patch_size": 15},
      "output_dir": DIR | null
    }

``model.in_bands`` and ``model.num_classes`` default to the scene's values.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .backbone import ModelConfig
from .data import DEFAULT_PATCH, SplitSpec
from .errors import ConfigError, FormatError
from .prompts import PromptBank, PromptConfig, load_prompt_bank
from .trainer import TrainConfig

PRESETS = ("tiny", "default")
TOP_LEVEL = ("model", "prompts", "train", "split", "data", "output_dir")


@dataclass
class DataConfig:
    scene: Optional[str] = None
    prompt_bank: Optional[str] = None
    task_id: int = 0
    patch_size: int = DEFAULT_PATCH

    def __post_init__(self) -> None:
        if self.task_id < 0:
            raise ConfigError(f"data: task_id must be >= 0, got {self.task_id}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"data: patch_size must be a positive odd integer, got {self.patch_size}")


@dataclass
class RunConfig:
    model: ModelConfig
    prompts: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: Optional[str] = None
    preset: str = "tiny"

    def to_dict(self) -> dict:
        return {
            "model": {"preset": self.preset, **self.model.to_dict()},
            "prompts": self.prompts.to_dict(),
            "train": self.train.to_dict(),
            "split": asdict(self.split),
            "data": asdict(self.data),
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def load_bank(self) -> PromptBank:
        if self.data.prompt_bank is None:
            return PromptBank.synthetic(num_tasks=self.data.task_id + 1)
        bank = load_prompt_bank(self.data.prompt_bank)
        if self.data.task_id >= bank.num_tasks:
            raise ConfigError(f"data: task_id {self.data.task_id} outside prompt bank of {bank.num_tasks} tasks")
        return bank


def _strict(cls, section: str, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _scene_shape(scene_dir: Optional[str]) -> dict:
    if scene_dir is None:
        return {}
    meta_path = Path(scene_dir) / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise FormatError(f"scene: not found: {meta_path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"scene: meta.json is not valid JSON ({exc.msg})") from None
    return {"in_bands": meta.get("bands"), "num_classes": meta.get("num_classes")}


def parse_run_config(doc: dict, base_dir: Union[str, os.PathLike, None] = None) -> RunConfig:
    """Build a fully resolved RunConfig; relative data paths resolve against ``base_dir``."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(doc) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    data = _strict(DataConfig, "data", doc.get("data", {}))
    if base_dir is not None:
        for key in ("scene", "prompt_bank"):
            value = getattr(data, key)
            if value is not None and not os.path.isabs(value):
                setattr(data, key, str(Path(base_dir) / value))

    model_doc = copy.deepcopy(doc.get("model", {}))
    if not isinstance(model_doc, dict):
        raise ConfigError("model: expected an object")
    preset = model_doc.pop("preset", "tiny")
    if preset not in PRESETS:
        raise ConfigError(f"model: unknown preset {preset!r}; expected one of {', '.join(PRESETS)}")
    known = {f.name for f in fields(ModelConfig)}
    bad = sorted(set(model_doc) - known)
    if bad:
        raise ConfigError(f"model: unknown keys {bad}")
    for key, value in _scene_shape(data.scene).items():
        model_doc.setdefault(key, value)
    model = ModelConfig.tiny(**model_doc) if preset == "tiny" else ModelConfig(**model_doc)

    train_doc = doc.get("train", {})
    train = TrainConfig.from_dict(train_doc) if isinstance(train_doc, dict) else _strict(TrainConfig, "train", train_doc)
    output_dir = doc.get("output_dir")
    if output_dir is not None and base_dir is not None and not os.path.isabs(output_dir):
        output_dir = str(Path(base_dir) / output_dir)
    return RunConfig(
        model=model,
        prompts=PromptConfig.from_dict(doc.get("prompts", {})),
        train=train,
        split=_strict(SplitSpec, "split", doc.get("split", {})),
        data=data,
        output_dir=output_dir,
        preset=preset,
    )


def load_run_config(path: Union[str, os.PathLike]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except (FileNotFoundError, IsADirectoryError):
        raise ConfigError(f"not found: {path}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_run_config(doc, base_dir=path.parent)
