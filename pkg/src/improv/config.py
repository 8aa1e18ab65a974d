"""Flat ``key = value`` run configuration covering model, training and paths."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathConfig:
    out_dir: str = "run"
    manifest: str = ""  # empty: generate the synthetic corpus on the fly
    resume: str = ""
    model_seed: int = -1  # -1: reuse the training seed


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    explicit: set = field(default_factory=set)

    SECTIONS = ("model", "train", "paths")

    @classmethod
    def keys(cls) -> dict[str, tuple[str, type]]:
        out = {}
        for section, dc in (("model", ModelConfig), ("train", TrainConfig), ("paths", PathConfig)):
            for f in fields(dc):
                out[f.name] = (section, type(getattr(dc(), f.name)))
        return out

    def set(self, key: str, raw: str) -> None:
        known = self.keys()
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        section, typ = known[key]
        try:
            if typ is bool:
                value = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                value = typ(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({typ.__name__} expected)") from exc
        setattr(getattr(self, section), key, value)
        self.explicit.add(key)

    def validate(self) -> None:
        """Re-run dataclass validation after piecemeal updates."""
        try:
            self.model = ModelConfig(**self.model.to_dict())
            self.train = TrainConfig(**self.train.to_dict())
            self.train.corpus()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        lines = []
        for section in self.SECTIONS:
            lines.append(f"# {section}")
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{f.name} = {getattr(obj, f.name)}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<string>", base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            cfg.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from exc
    return parse_config(text, str(p))
