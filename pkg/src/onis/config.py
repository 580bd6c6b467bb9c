"""Run configuration: nested dataclass blocks, JSON round-trip and dotted overrides."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Optional, Tuple

from .dataset import DatasetConfig
from .deploy import BenchmarkSuite, DeployConfig, FlatBCConfig
from .multimodal import EncoderConfig, PromptTrainConfig
from .skillseq import DecoderConfig, USkillConfig
from .transfer import TransferConfig
from .world import EnvConfig

SEED_ENV_VAR = "ONIS_SEED"


class ConfigError(ValueError):
    """Invalid configuration: unknown key, bad value or malformed override."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    prompt: PromptTrainConfig = field(default_factory=PromptTrainConfig)
    uskill: USkillConfig = field(default_factory=USkillConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    flat_bc: FlatBCConfig = field(default_factory=FlatBCConfig)
    deploy: DeployConfig = field(default_factory=DeployConfig)
    eval: BenchmarkSuite = field(default_factory=BenchmarkSuite)


def to_dict(cfg) -> Dict[str, Any]:
    """Plain JSON-compatible nested dict (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        return _build(tp, value, path)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if args and len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value))) if args \
            else tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Dict[str, Any], path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or "config"
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: Dict[str, Any]) -> RunConfig:
    """Build a :class:`RunConfig`; missing keys keep defaults, unknown keys raise :class:`ConfigError`."""
    return _build(RunConfig, data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(tree: Dict[str, Any], path: str, value) -> None:
    keys = path.split(".")
    node = tree
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys[:i + 1])!r}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key {path!r}")
    node[keys[-1]] = value


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Apply ``key.path=value`` strings (values parsed as JSON, else taken as strings)."""
    tree = to_dict(cfg)
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, text = item.split("=", 1)
        _set_path(tree, key.strip(), _parse_value(text))
    return from_dict(tree)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                environ: Optional[Dict[str, str]] = None) -> RunConfig:
    """File (optional), then overrides, then the ``ONIS_SEED`` environment variable."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = apply_overrides(from_dict(data), overrides)
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV_VAR):
        try:
            seed = int(env[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env[SEED_ENV_VAR]!r}") from exc
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
