"""Run configuration: flat typed TOML, defaults, CLI overrides.

Every knob lives in a section mirroring the pipeline stage that consumes it.
Unknown sections or keys are errors, types are checked against the defaults,
and a config can be written back out and re-read without loss.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, asdict

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .simulator import PlantConfig


class ConfigError(Exception):
    """Unparseable, unknown, or ill-typed configuration."""


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int = 1
    out_dir: str = "out"


@dataclass(frozen=True)
class SessionizeSection:
    merge_gap_hours: float = 2.0
    tolerance_hours: float = 24.0


@dataclass(frozen=True)
class EvaluateSection:
    folds: int = 5
    ks: tuple[int, ...] = (1, 3)
    threshold: float = 0.5
    models: tuple[str, ...] = ("business_rule", "logistic", "gbdt")


@dataclass(frozen=True)
class TrainSection:
    model: str = "gbdt"


@dataclass(frozen=True)
class ForecastSection:
    window: int = 72
    hop: int = 1
    horizons: tuple[int, ...] = (1, 3, 8)
    cutoffs: tuple[float, ...] = (2.0, 6.0)
    target_column: str = "cer_mean_us"
    min_availability: float = 0.8
    split: str = "temporal"
    train_fraction: float = 0.8
    models: tuple[str, ...] = ("persistence", "logistic", "gbdt")


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = RunSection()
    simulate: PlantConfig = PlantConfig()
    sessionize: SessionizeSection = SessionizeSection()
    evaluate: EvaluateSection = EvaluateSection()
    train: TrainSection = TrainSection()
    forecast: ForecastSection = ForecastSection()
    # Free-form per-model hyperparameter tables, validated where consumed.
    models: dict = field(default_factory=dict)


_SECTION_TYPES = {
    "run": RunSection,
    "simulate": PlantConfig,
    "sessionize": SessionizeSection,
    "evaluate": EvaluateSection,
    "train": TrainSection,
    "forecast": ForecastSection,
}
_MODEL_TABLES = ("business_rule", "logistic", "gbdt", "rule_list")


def _coerce(name, value, default):
    """Type-check a TOML value against the default's type; ints may widen."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        if default:
            return tuple(_coerce(f"{name}[]", v, default[0]) for v in value)
        return tuple(value)
    raise ConfigError(f"{name}: unsupported config type {type(default).__name__}")


def _section_from_dict(cls, data, section):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(f"[{section}] {key}", value, getattr(defaults, key))
    return cls(**kwargs)


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    unknown = set(data) - set(_SECTION_TYPES) - {"models"}
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        body = data.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        kwargs[section] = _section_from_dict(cls, body, section)
    model_tables = data.get("models", {})
    if not isinstance(model_tables, dict):
        raise ConfigError("[models] must hold per-model tables")
    unknown = set(model_tables) - set(_MODEL_TABLES)
    if unknown:
        raise ConfigError(f"unknown model table(s) {sorted(unknown)}")
    for name, body in model_tables.items():
        if not isinstance(body, dict):
            raise ConfigError(f"[models.{name}] must be a table")
    kwargs["models"] = {k: dict(v) for k, v in model_tables.items()}
    return RunConfig(**kwargs)


def load_config(path):
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: not valid TOML: {exc}") from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: no such config file") from exc
    try:
        cfg = config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    try:
        cfg.simulate.validate()
    except ValueError as exc:
        raise ConfigError(f"[simulate]: {exc}") from exc
    if cfg.evaluate.folds < 2:
        raise ConfigError("[evaluate] folds must be >= 2")
    if any(k < 1 for k in cfg.evaluate.ks):
        raise ConfigError("[evaluate] ks must all be >= 1")
    if not 0.0 < cfg.evaluate.threshold < 1.0:
        raise ConfigError("[evaluate] threshold must be in (0, 1)")
    for m in cfg.evaluate.models:
        if m not in _MODEL_TABLES:
            raise ConfigError(f"[evaluate] unknown model {m!r}")
    if cfg.train.model not in _MODEL_TABLES:
        raise ConfigError(f"[train] unknown model {cfg.train.model!r}")
    if cfg.forecast.split not in ("temporal", "random"):
        raise ConfigError("[forecast] split must be 'temporal' or 'random'")
    if not 0.0 < cfg.forecast.train_fraction < 1.0:
        raise ConfigError("[forecast] train_fraction must be in (0, 1)")
    if cfg.sessionize.merge_gap_hours < 0 or cfg.sessionize.tolerance_hours < 0:
        raise ConfigError("[sessionize] gaps and tolerances must be >= 0")
    return cfg


def config_to_dict(cfg):
    out = {}
    for section in _SECTION_TYPES:
        out[section] = asdict(getattr(cfg, section))
    if cfg.models:
        out["models"] = {k: dict(v) for k, v in cfg.models.items()}
    return out


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot write config value {value!r}")


def config_to_toml(cfg):
    """Serialize; load(config_to_toml(cfg)) round-trips exactly."""
    doc = config_to_dict(cfg)
    lines = []
    for section, body in doc.items():
        if section == "models":
            for model, table in body.items():
                lines.append(f"[models.{model}]")
                for key, value in table.items():
                    lines.append(f"{key} = {_toml_value(value)}")
                lines.append("")
            continue
        lines.append(f"[{section}]")
        for key, value in body.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(config_to_toml(cfg))


def parse_override(text):
    """Parse one --set dotted.key=value assignment; value uses TOML syntax."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    raw = raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare strings are convenient on the command line
    return key, value


def apply_overrides(data, assignments):
    """Apply dotted-path assignments onto a raw config dict."""
    for text in assignments:
        key, value = parse_override(text)
        parts = key.split(".")
        if len(parts) < 2:
            raise ConfigError(f"override key {key!r} needs a section prefix")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} walks through a non-table")
        node[parts[-1]] = value
    return data


def load_config_with_overrides(path, assignments=()):
    if path is None:
        data = {}
    else:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: not valid TOML: {exc}") from exc
        except FileNotFoundError as exc:
            raise ConfigError(f"{path}: no such config file") from exc
    data = apply_overrides(data, assignments)
    try:
        cfg = config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path or '<defaults>'}: {exc}") from exc
    validate_config(cfg)
    return cfg


def config_hash(cfg):
    """Stable digest of the fully-resolved configuration.

    Performance knobs (thread budget, output directory) do not change any
    result, so they are left out of the hash.
    """
    doc = config_to_dict(cfg)
    doc.get("run", {}).pop("threads", None)
    doc.get("run", {}).pop("out_dir", None)
    payload = json.dumps(doc, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()
