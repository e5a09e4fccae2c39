"""
fedvit.config

Run configuration, read from TOML.

Example::

    mode = "encrypted"
    strategy = "fedsgd"
    clients = 5
    rounds = 20
    lr = 0.1
    seed = 7
    key = "shared.fvk"

    [model]
    patch_size = 8

    [data]
    source = "synthetic"
    train_size = 1000
    test_size = 500

    [transport]
    kind = "socket"
    host = "127.0.0.1"
    port = 0
"""
import dataclasses
import enum
import typing
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import toml

from .errors import ConfigError
from .model import ModelConfig


class Mode(str, enum.Enum):
    PLAIN = "plain"
    ENCRYPTED = "encrypted"


class Strategy(str, enum.Enum):
    FEDSGD = "fedsgd"
    FEDAVG = "fedavg"


class DataSource(str, enum.Enum):
    SYNTHETIC = "synthetic"
    CIFAR10 = "cifar10"
    IDX = "idx"


class TransportKind(str, enum.Enum):
    LOOPBACK = "loopback"
    SOCKET = "socket"


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """
    Where training and test samples come from. per_client defaults to an
    even split of the training set.
    """

    source: DataSource = DataSource.SYNTHETIC
    train_size: int = 1000
    test_size: int = 500
    noise: float = 0.05
    per_client: Optional[int] = None
    train_files: tuple = ()
    test_files: tuple = ()
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class TransportConfig:
    kind: TransportKind = TransportKind.LOOPBACK
    host: str = "127.0.0.1"
    port: int = 0
    timeout: float = 60.0

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    mode: Mode = Mode.PLAIN
    strategy: Strategy = Strategy.FEDSGD
    clients: int = 5
    rounds: int = 20
    lr: float = 0.1
    seed: int = 0
    local_epochs: int = 1
    batch_size: int = 8
    key: Optional[str] = None
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    transport: TransportConfig = dataclasses.field(
        default_factory=TransportConfig
    )

    def with_overrides(self, **changes) -> "RunConfig":
        """
        Copy with top level fields replaced; None values are ignored.
        Nested blocks may be given as dicts of their own fields.
        """
        values: Dict[str, Any] = {}
        for name, value in changes.items():
            if value is None:
                continue
            current = getattr(self, name)
            if dataclasses.is_dataclass(current) and isinstance(
                value, Mapping
            ):
                value = _build(type(current), value, name, base=current)
            else:
                (field,) = [
                    f for f in dataclasses.fields(self) if f.name == name
                ]
                value = _coerce(_field_kind(field), value, name)
            values[name] = value
        if not values:
            return self
        cfg = dataclasses.replace(self, **values)
        validate(cfg)
        return cfg


def _coerce(kind: Any, value: Any, key: str) -> Any:
    if isinstance(kind, type) and issubclass(kind, enum.Enum):
        try:
            return kind(value)
        except ValueError as exc:
            choices = ", ".join(member.value for member in kind)
            raise ConfigError(f"must be one of {choices}", key=key) from exc
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError("must be true or false", key=key)
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("must be an integer", key=key)
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("must be a number", key=key)
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError("must be a string", key=key)
        return value
    if kind is tuple:
        if isinstance(value, str) or not isinstance(value, (list, tuple)):
            raise ConfigError("must be a list of paths", key=key)
        return tuple(str(item) for item in value)
    return value


def _field_kind(field: dataclasses.Field) -> Any:
    kind = field.type
    if typing.get_origin(kind) is Union:
        kind = next(a for a in typing.get_args(kind) if a is not type(None))
    return kind


def _build(
    cls: type, raw: Mapping[str, Any], prefix: str, base: Any = None
) -> Any:
    """
    :param cls: dataclass to build
    :param raw: mapping of field name to raw value
    :param prefix: str Dotted path of this block, for error keys
    :param base: Optional instance supplying values missing from raw
    """
    if not isinstance(raw, Mapping):
        raise ConfigError("must be a table", key=prefix)
    fields = {field.name: field for field in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        key = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise ConfigError("unknown setting", key=key)
    values = {}
    for name, value in raw.items():
        key = f"{prefix}.{name}" if prefix else name
        values[name] = _coerce(_field_kind(fields[name]), value, key)
    if base is not None:
        return dataclasses.replace(base, **values)
    return cls(**values)


def parse_config(raw: Mapping[str, Any]) -> RunConfig:
    """
    :param raw: parsed TOML document
    :return: RunConfig
    """
    raw = dict(raw)
    blocks = {}
    for name, cls in (
        ("model", ModelConfig),
        ("data", DataConfig),
        ("transport", TransportConfig),
    ):
        if name in raw:
            blocks[name] = _build(cls, raw.pop(name), name)
    top = _build(RunConfig, raw, "")
    cfg = dataclasses.replace(top, **blocks)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    """
    :raises ConfigError: naming the first invalid setting
    """
    if cfg.clients < 1:
        raise ConfigError("must be at least 1", key="clients")
    if cfg.rounds < 0:
        raise ConfigError("must not be negative", key="rounds")
    if not cfg.lr > 0.0:
        raise ConfigError("must be positive", key="lr")
    if cfg.seed < 0 or cfg.seed >= 2**256:
        raise ConfigError("must be in [0, 2**256)", key="seed")
    if cfg.local_epochs < 1:
        raise ConfigError("must be at least 1", key="local_epochs")
    if cfg.batch_size < 1:
        raise ConfigError("must be at least 1", key="batch_size")
    data = cfg.data
    if data.train_size < 1:
        raise ConfigError("must be at least 1", key="data.train_size")
    if data.test_size < 1:
        raise ConfigError("must be at least 1", key="data.test_size")
    if data.noise < 0.0:
        raise ConfigError("must not be negative", key="data.noise")
    if data.per_client is not None and data.per_client < 1:
        raise ConfigError("must be at least 1", key="data.per_client")
    if data.source is DataSource.CIFAR10 and not data.train_files:
        raise ConfigError(
            "cifar10 needs at least one file", key="data.train_files"
        )
    if data.source is DataSource.IDX and not (
        data.train_images and data.train_labels
    ):
        raise ConfigError(
            "idx needs train_images and train_labels",
            key="data.train_images",
        )
    transport = cfg.transport
    if not 0 <= transport.port < 65536:
        raise ConfigError("must be in [0, 65536)", key="transport.port")
    if not transport.timeout > 0.0:
        raise ConfigError("must be positive", key="transport.timeout")


def load_config(path: Union[str, Path]) -> RunConfig:
    """
    :param path: str | Path of a TOML file
    :return: RunConfig
    """
    try:
        raw = toml.load(str(path))
    except FileNotFoundError as exc:
        raise ConfigError("file not found", key=str(path)) from exc
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", key=str(path)) from exc
    return parse_config(raw)


def as_dict(value: Any) -> Any:
    """
    Plain data snapshot of a config, enums as their values; suitable for
    TOML and JSON.
    """
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {
            field.name: as_dict(getattr(value, field.name))
            for field in dataclasses.fields(value)
            if getattr(value, field.name) is not None
        }
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, tuple):
        return [as_dict(item) for item in value]
    return value
