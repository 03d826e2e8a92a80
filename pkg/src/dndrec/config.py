"""Experiment configuration: an INI file, overridden by command-line flags.

Sections and keys::

    [data]        path, delimiter, session_col, item_col, time_col, date_format, gap, name
    [preprocess]  min_item_count, min_session_len, test_fraction, val_fraction
    [model]       any ModelConfig field except num_items
    [train]       any TrainConfig field
    [run]         seed, out, jobs

``gap`` (seconds) turns on inactivity sessionization; leave it unset for logs
that already carry session ids.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from typing import Any, get_type_hints

from .dataset import EventFormat
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    path: str = ""
    name: str = ""
    delimiter: str = "\t"
    session_col: str = "session_id"
    item_col: str = "item_id"
    time_col: str = "timestamp"
    date_format: str | None = None
    gap: float | None = None

    def event_format(self) -> EventFormat:
        return EventFormat(self.delimiter, self.session_col, self.item_col, self.time_col,
                           self.date_format)


@dataclass
class PreprocessConfig:
    min_item_count: int = 5
    min_session_len: int = 2
    test_fraction: float = 0.1
    val_fraction: float = 0.1


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    jobs: int = 1


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: dict[str, Any] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)
    run: RunConfig = field(default_factory=RunConfig)

    def model_config(self, num_items: int = 0) -> ModelConfig:
        return ModelConfig(num_items=num_items, **self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.run.seed, **self.train})

    def resolved(self) -> dict:
        """Fully expanded config, as echoed into every artifact."""
        return {
            "data": asdict(self.data),
            "preprocess": asdict(self.preprocess),
            "model": {k: v for k, v in self.model_config(0).to_dict().items()
                      if k != "num_items"},
            "train": self.train_config().to_dict(),
            "run": asdict(self.run),
        }


def _coerce(raw: str, hint) -> Any:
    text = raw.strip()
    if text.lower() in ("", "none", "null"):
        return None
    if "str" in str(hint):
        return "\t" if text in ("\\t", "tab") else text
    if text.lower() in ("true", "yes", "on"):
        return True
    if text.lower() in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    raise ConfigError(f"cannot parse value {text!r}")


def _typed_fields(cls) -> dict[str, Any]:
    hints = get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _section(parser, name: str, cls) -> dict[str, Any]:
    if not parser.has_section(name):
        return {}
    known = _typed_fields(cls)
    out = {}
    for key, raw in parser.items(name):
        if key not in known:
            raise ConfigError(f"unknown key [{name}] {key}")
        out[key] = _coerce(raw, known[key])
    return out


def load_config(path=None) -> ExperimentConfig:
    """Parse an INI file (or return defaults when ``path`` is None)."""
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    extra = set(parser.sections()) - {"data", "preprocess", "model", "train", "run"}
    if extra:
        raise ConfigError(f"unknown config sections {sorted(extra)}")
    data = _section(parser, "data", DataConfig)
    if "delimiter" in data and data["delimiter"] is None:
        data["delimiter"] = "\t"
    cfg.data = DataConfig(**{**asdict(cfg.data), **data})
    cfg.preprocess = PreprocessConfig(**_section(parser, "preprocess", PreprocessConfig))
    cfg.model = _section(parser, "model", ModelConfig)
    cfg.model.pop("num_items", None)
    cfg.train = _section(parser, "train", TrainConfig)
    cfg.run = RunConfig(**_section(parser, "run", RunConfig))
    # validate eagerly so errors surface before any work
    cfg.model_config(1)
    cfg.train_config()
    return cfg


def apply_overrides(cfg: ExperimentConfig, **flags) -> ExperimentConfig:
    """Command-line values win over file values; ``None`` means not given."""
    run_keys = {f.name for f in fields(RunConfig)}
    model_keys = {f.name for f in fields(ModelConfig)} - {"num_items"}
    train_keys = {f.name for f in fields(TrainConfig)} - {"seed"}
    for key, value in flags.items():
        if value is None:
            continue
        if key in run_keys:
            setattr(cfg.run, key, value)
        elif key in model_keys:
            cfg.model[key] = value
        elif key in train_keys:
            cfg.train[key] = value
        else:
            raise ConfigError(f"unknown override {key}")
    cfg.model_config(1)
    cfg.train_config()
    return cfg
