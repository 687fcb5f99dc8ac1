"""One configuration file (INI sections) plus dotted command-line overrides.

Sections are ``model``, ``train``, ``data``, ``probe`` and ``run``; every field
of the matching dataclass is a key of the same name. Values are Python
literals, ``a, b`` lists, or ``1/8`` style fractions.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .avsync import ProbeConfig
from .model.config import ConfigError, ModelConfig, fraction, preset
from .synth import DatasetSpec
from .training import TrainConfig


@dataclass(frozen=True)
class RunSettings:
    out: str = "runs/default"
    seed: int = 0
    preset: str = "desk-default"
    val_clips_per_class: int = 8
    data_dir: str = ""
    checkpoint: str = ""
    pretrain: bool = True
    pretrain_iters: int = 300
    rot_weight: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def to_ini(self) -> str:
        lines = []
        for section in ("run", "model", "train", "data", "probe"):
            value = getattr(self, section)
            lines.append(f"[{section}]")
            lines.extend(f"{f.name} = {_format(getattr(value, f.name))}" for f in fields(value))
            lines.append("")
        return "\n".join(lines)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        try:
            self.data.validate()
        except ValueError as err:
            raise ConfigError("data", str(err)) from None
        return self


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DatasetSpec, "probe": ProbeConfig,
            "run": RunSettings}
FRACTION_KEYS = {"beta_f", "beta_a", "width_mult"}


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value) if value else "()"
    if value is None:
        return "None"
    return repr(value) if isinstance(value, str) else str(value)


def _field_type(cls, key: str):
    for f in fields(cls):
        if f.name == key:
            return f
    return None


def parse_value(section: str, key: str, text: str) -> Any:
    cls = SECTIONS[section]
    f = _field_type(cls, key)
    if f is None:
        raise ConfigError(f"{section}.{key}", "unknown key")
    text = text.strip()
    default = f.default if f.default is not dataclasses.MISSING else None
    try:
        if key in FRACTION_KEYS:
            return fraction(text)
        if isinstance(default, tuple):
            if text in ("", "()"):
                return ()
            if text.startswith("("):
                value = ast.literal_eval(text)
                return tuple(value) if isinstance(value, (tuple, list)) else (value,)
            parts = [p.strip().strip("'\"") for p in text.split(",") if p.strip()]
            return tuple(int(p) if p.lstrip("-").isdigit() else p for p in parts)
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, str):
            value = ast.literal_eval(text) if text[:1] in "'\"" else text
            return str(value)
        value = ast.literal_eval(text)
        if isinstance(default, float) and isinstance(value, int):
            value = float(value)
        return value
    except (ValueError, SyntaxError):
        raise ConfigError(f"{section}.{key}", f"cannot parse {text!r}") from None


def _split_key(dotted: str) -> tuple[str, str]:
    if "." not in dotted:
        # bare keys resolve to the unique section that declares them
        owners = [s for s, cls in SECTIONS.items() if _field_type(cls, dotted) is not None]
        if len(owners) != 1:
            raise ConfigError(dotted, "unknown key" if not owners else f"ambiguous key, use one of "
                              + ", ".join(f"{o}.{dotted}" for o in owners))
        return owners[0], dotted
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(dotted, f"unknown section {section!r}")
    return section, key


def load_run_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None, *,
                    preset_name: str | None = None, seed: int | None = None) -> RunConfig:
    """Merge defaults, preset, file and overrides (later wins) and validate."""
    values: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except configparser.Error as err:
            raise ConfigError("config", f"{path}: {err}".replace("\n", " ")) from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(section, f"unknown section in {path}")
            for key, text in parser[section].items():
                values[section][key] = parse_value(section, key, text)
    for dotted, text in (overrides or {}).items():
        section, key = _split_key(dotted)
        values[section][key] = parse_value(section, key, text)
    if preset_name is not None:
        values["run"]["preset"] = preset_name
    if seed is not None:
        values["run"]["seed"] = seed
    run = RunSettings(**values["run"])
    model = preset(run.preset).replace(**values["model"])
    train_values = {"seed": run.seed, **values["train"]}
    data_values = {"seed": run.seed, **values["data"]}
    if "num_classes" not in values["data"]:
        data_values["num_classes"] = min(model.num_classes, 4)
    probe_values = {"seed": run.seed, **values["probe"]}
    cfg = RunConfig(model, TrainConfig(**train_values), DatasetSpec(**data_values),
                    ProbeConfig(**probe_values), run)
    return cfg.validate()


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved.ini"
    path.write_text(cfg.to_ini(), encoding="utf-8")
    return path


def to_json(cfg: RunConfig) -> str:
    return json.dumps({s: dataclasses.asdict(getattr(cfg, s)) for s in SECTIONS}, sort_keys=True)
