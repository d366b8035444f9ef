"""One-file JSON run configuration: model, training, STFT and dataset settings."""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from src.audiofuse.dsp import StftConfig
from src.audiofuse.errors import AudioFuseError, ConfigError
from src.audiofuse.model import ModelConfig
from src.audiofuse.training import TrainConfig

SECTIONS = ("model", "train", "stft", "data", "output_dir")


@dataclass(frozen=True)
class DataConfig:
    manifest: str = "manifest.csv"
    val_fraction: float = 0.2
    split_seed: int = 0
    cache_dir: str = ""


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/latest"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "stft": dataclasses.asdict(self.stft),
            "data": dataclasses.asdict(self.data),
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _check_type(pointer: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{pointer}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{pointer}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{pointer}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, tuple):
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{pointer}: expected a list of integers, got {value!r}")
        value = tuple(value)
    elif isinstance(default, str) and pointer.endswith("/class_weights"):
        if value != "auto" and not (
            isinstance(value, list) and all(isinstance(v, (int, float)) for v in value)
        ):
            raise ConfigError(f"{pointer}: expected \"auto\" or [w0, w1], got {value!r}")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{pointer}: expected a string, got {value!r}")
    return value


def _build_section(pointer: str, cls, document: Any, overrides: Dict[str, Any]):
    if not isinstance(document, dict):
        raise ConfigError(f"{pointer}: expected an object, got {type(document).__name__}")
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    values = {}
    for key, value in document.items():
        if key not in defaults:
            raise ConfigError(f"{pointer}/{key}: unknown key")
        values[key] = _check_type(f"{pointer}/{key}", value, defaults[key])
    values.update(overrides)
    try:
        return cls(**values)
    except AudioFuseError as e:
        raise ConfigError(f"{pointer}: {e}") from None


def parse_run_config(
    document: Any,
    base_dir: Optional[Path] = None,
    overrides: Optional[Dict[str, Dict[str, Any]]] = None,
    default_seed: int = 0,
) -> RunConfig:
    """
    Validate a run document and build the frozen configuration
    :param document: Parsed JSON
    :param base_dir: Directory relative manifest and output paths are resolved against
    :param overrides: Section -> {key: value}, applied after validation (CLI flags)
    :param default_seed: Training seed used when `/train/seed` is absent
    :return: RunConfig
    """
    if not isinstance(document, dict):
        raise ConfigError("/: run configuration must be a JSON object")
    for key in document:
        if key not in SECTIONS:
            raise ConfigError(f"/{key}: unknown key")
    overrides = overrides or {}
    train_doc = document.get("train", {})
    if not isinstance(train_doc, dict):
        raise ConfigError(f"/train: expected an object, got {type(train_doc).__name__}")
    train_overrides = dict(overrides.get("train", {}))
    if "seed" not in train_doc and "seed" not in train_overrides:
        train_overrides["seed"] = default_seed

    data = _build_section("/data", DataConfig, document.get("data", {}), overrides.get("data", {}))
    output_dir = overrides.get("output_dir", document.get("output_dir", RunConfig.output_dir))
    if not isinstance(output_dir, str):
        raise ConfigError(f"/output_dir: expected a string, got {output_dir!r}")
    if base_dir is not None:
        data = dataclasses.replace(data, manifest=str(Path(base_dir) / data.manifest))
        if data.cache_dir:
            data = dataclasses.replace(data, cache_dir=str(Path(base_dir) / data.cache_dir))
        output_dir = str(Path(base_dir) / output_dir)
    return RunConfig(
        model=_build_section("/model", ModelConfig, document.get("model", {}), overrides.get("model", {})),
        train=_build_section("/train", TrainConfig, train_doc, train_overrides),
        stft=_build_section("/stft", StftConfig, document.get("stft", {}), overrides.get("stft", {})),
        data=data,
        output_dir=output_dir,
    )


def load_run_config(path, overrides=None, default_seed: int = 0) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"run configuration {path} does not exist")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"/: {path} is not valid JSON ({e})") from None
    return parse_run_config(document, path.parent, overrides, default_seed)
