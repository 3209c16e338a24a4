"""Run configuration: one dataclass tree, JSON on disk, ``--set`` overrides on the command line."""
import dataclasses
import json
import logging
import typing
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from autodiff import FitConfig
from errors import ConfigError, SceneKitError
from field import FieldConfig, SceneExtent
from meshing import MeshConfig
from renderer import MarchConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PathsConfig:
    data_dir: Optional[str] = None
    out_dir: str = "runs/latest"
    checkpoint: Optional[str] = None
    log: Optional[str] = None


@dataclass(frozen=True)
class Config:
    extent: SceneExtent = SceneExtent()
    field: FieldConfig = FieldConfig()
    march: MarchConfig = MarchConfig()
    fit: FitConfig = FitConfig()
    mesh: MeshConfig = MeshConfig()
    cameras: List[Dict[str, Any]] = dataclass_field(default_factory=list)
    paths: PathsConfig = PathsConfig()

    def validate(self) -> "Config":
        try:
            self.extent.pad_cells(self.field.res)
            self.field.validate(self.extent)
            self.march.validate()
            self.fit.validate()
            self.mesh.validate()
        except ConfigError:
            raise
        except SceneKitError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e
        return self

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Config":
        return _build(cls, data, "")


def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_to_plain(v) for v in value]
    if isinstance(value, float) and value == float("inf"):
        return "inf"
    return value


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"'{path}' must be a mapping")
        return _build(tp, value, path)
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{path}' must be a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, path) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"'{path}' needs {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, path) for a, v in zip(args, value))
    if origin in (list, List):
        return list(value)
    if tp is float:
        try:
            return float(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"'{path}' must be a number, got {value!r}") from e
    if tp is int:
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"'{path}' must be an integer, got {value!r}")
        return int(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true or false, got {value!r}")
        return value
    return value


def _build(cls, data: Dict[str, Any], prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise ConfigError(f"Unknown configuration key '{where}'")
    kwargs = {k: _coerce(hints[k], v, f"{prefix}.{k}" if prefix else k) for k, v in data.items()}
    return cls(**kwargs)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[List[str]] = None) -> Config:
    """Config file (optional) plus ``section.key=value`` overrides; overrides win."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Failed to read config {path}: {e}") from e
    for item in overrides or []:
        apply_override(data, item)
    return Config.from_dict(data).validate()


def apply_override(data: Dict[str, Any], item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"Override '{item}' must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Override '{key}' descends into a non-mapping")
    node[parts[-1]] = value


def save_config(cfg: Config, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))
