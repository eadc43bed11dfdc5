"""Run configuration: ``key = value`` files with one section per module.

Every key has a default below; a key the file names that is not listed here
is rejected.  Lists are comma separated, ``none`` means no value.

    [data]
    n_scenes = 2500
    k = 4,6,8

    [model]
    ablation = no-interaction
"""

from __future__ import annotations

import configparser
import io
from dataclasses import fields
from pathlib import Path

from .model import ABLATIONS, FusionConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {
        "path": "data",
        "n_scenes": 2500,
        "views": 3,
        "k": (4, 6, 8),
        "dims": 16,
        "seed": 0,
        "min_count": 5,
        "n_frequent": 1000,
        "noise": 0.05,
    },
    "model": {
        "T1": 2,
        "T2": 2,
        "s": 64,
        "att_size": None,
        "embed_size": None,
        "ablation": "full",
        "dropout_p": 0.3,
        "view_subset": None,
        "discriminative": True,
    },
    "train": {f.name: f.default for f in fields(TrainConfig)},
    "run": {
        "checkpoint": "out/model.rfn",
        "split": "test",
        "beam": 3,
        "max_len": 16,
        "seeds": (0, 1, 2, 3, 4),
        "ablations": ABLATIONS,
        "rl_updates": None,
    },
}

_TUPLE_KEYS = {("data", "k"), ("model", "view_subset"), ("run", "seeds"), ("run", "ablations")}
_OPTIONAL_INT = {("model", "att_size"), ("model", "embed_size"), ("train", "max_steps"), ("run", "rl_updates")}
_OPTIONAL_FLOAT = {("train", "clip_norm")}


def _parse(section: str, key: str, text: str):
    default = DEFAULTS[section][key]
    text = text.strip()
    try:
        if (section, key) in _TUPLE_KEYS:
            if text.lower() == "none":
                return None
            items = [t.strip() for t in text.split(",") if t.strip()]
            if key == "ablations":
                bad = [a for a in items if a not in ABLATIONS]
                if bad:
                    raise ValueError(f"unknown ablation {bad[0]!r}")
                return tuple(items)
            return tuple(int(t) for t in items)
        if (section, key) in _OPTIONAL_INT:
            return None if text.lower() == "none" else int(text)
        if (section, key) in _OPTIONAL_FLOAT:
            return None if text.lower() == "none" else float(text)
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


class RunConfig:
    """Nested ``section -> key -> value`` mapping with defaults filled in."""

    def __init__(self, values: dict | None = None):
        self.values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
        for sec, keys in (values or {}).items():
            for key, val in keys.items():
                self.set(sec, key, val)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        if isinstance(value, str):
            value = _parse(section, key, value)
        self.values[section][key] = value

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls()
        for section in parser.sections():
            for key, val in parser.items(section):
                cfg.set(section, key, val)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for sec, keys in self.values.items():
            parser[sec] = {k: _format(v) for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.values["train"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def fusion_config(self, view_dims, vocab_size: int, n_frequent: int) -> FusionConfig:
        m = self.values["model"]
        try:
            return FusionConfig(
                view_dims=tuple(view_dims), vocab_size=vocab_size, n_frequent=n_frequent, T1=m["T1"], T2=m["T2"],
                s=m["s"], att_size=m["att_size"], embed_size=m["embed_size"], ablation=m["ablation"],
                dropout_p=m["dropout_p"], view_subset=m["view_subset"], discriminative=m["discriminative"],
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
