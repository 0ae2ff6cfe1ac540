"""
Run configuration: one flat YAML mapping, one scalar per key.
"""

from dataclasses import asdict, dataclass, fields
from io import StringIO
from pathlib import Path, PurePath
from typing import Any, Dict, Optional

import numpy as np
from ruamel.yaml import YAML
from ruamel.yaml.comments import CommentedMap
from ruamel.yaml.error import YAMLError

from langskill.errors import ConfigError
from langskill.trainer import TrainConfig

RESOLVED_CONFIG_NAME = "resolved_config.yaml"
EVAL_SPLITS = ("eval_seen", "eval_unseen")


@dataclass
class RunConfig(TrainConfig):
    """Training keys plus dataset location, evaluation settings and output directory."""

    dataset_dir: str = "data"
    out_dir: str = "runs/lisa"
    eval_split: str = "eval_seen"
    eval_episodes: int = 100
    eval_seeds: int = 3
    workers: int = 4
    log_level: str = "INFO"

    def _verify(self) -> None:
        super()._verify()
        if self.eval_split not in EVAL_SPLITS:
            raise ValueError(f"eval_split must be one of {EVAL_SPLITS} but {self.eval_split!r} given")
        if self.eval_episodes < 1 or self.eval_seeds < 1:
            raise ValueError("eval_episodes and eval_seeds must be at least 1")


def yaml_handler() -> YAML:
    """Round-trip YAML handler that also writes numpy scalars and paths."""
    yaml = YAML()
    yaml.representer.add_representer(np.int64, lambda obj, val: obj.represent_int(int(val)))
    yaml.representer.add_representer(np.int32, lambda obj, val: obj.represent_int(int(val)))
    yaml.representer.add_representer(np.str_, lambda obj, val: obj.represent_str(str(val)))
    yaml.representer.add_representer(np.float64, lambda obj, val: obj.represent_float(float(val)))
    yaml.representer.add_multi_representer(PurePath, lambda obj, val: obj.represent_str(str(val)))
    return yaml


def _coerce(key: str, value: Any, kind: type, line: Optional[int]) -> Any:
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return int(value)
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif kind is str:
        if isinstance(value, (str, int, float)) and not isinstance(value, bool):
            return str(value)
    raise ConfigError(f"{key} expects {kind.__name__} but {value!r} given", line)


def parse_config(text: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Parse a flat YAML mapping into a RunConfig; missing keys keep their defaults.

    :param text: YAML text
    :type text: str
    :param overrides: Values applied after the file (for example command-line options)
    :type overrides: dict, optional
    :return: Resolved configuration
    :rtype: RunConfig
    :raises ConfigError: On syntax errors, unknown keys, nested values or bad types, with the 1-based line
    """
    try:
        data = yaml_handler().load(text)
    except YAMLError as error:
        mark = getattr(error, "problem_mark", None)
        line = mark.line + 1 if mark else None
        raise ConfigError(f"invalid YAML: {getattr(error, 'problem', error)}", line) from error
    if data is None:
        data = CommentedMap()
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping of key: value lines", 1)
    types = {f.name: f.type for f in fields(RunConfig)}
    values: Dict[str, Any] = {}
    for key, value in data.items():
        line = data.lc.key(key)[0] + 1 if isinstance(data, CommentedMap) else None
        if key not in types:
            raise ConfigError(f"unknown key {key!r}", line)
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{key} must be a single value, nested values are not allowed", line)
        values[key] = _coerce(key, value, types[key], line)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**values)
    except ValueError as error:
        raise ConfigError(str(error)) from error


def load_config(path: Optional[Path], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read ``path`` (defaults only when None) and apply ``overrides``."""
    if path is None:
        return parse_config("", overrides)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no configuration file at {path}")
    return parse_config(path.read_text(), overrides)


def dump_config(cfg: RunConfig) -> str:
    data = CommentedMap()
    for key, value in asdict(cfg).items():
        data[key] = value
    stream = StringIO()
    yaml_handler().dump(data, stream)
    return stream.getvalue()


def save_config(cfg: RunConfig, out_dir: Path) -> Path:
    """Write the fully resolved configuration next to a command's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    path.write_text(dump_config(cfg))
    return path
