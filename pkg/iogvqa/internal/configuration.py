import copy
import os
import typing
from collections.abc import Iterable
from enum import Enum
from pathlib import Path
from typing import Any, Optional, TypeVar, Union, cast, overload

import pydantic
from omegaconf import Container, DictConfig, OmegaConf

__doc__ = """Layered configuration

A `Configuration` wraps an omegaconf DictConfig. Typed sections are pydantic
models registered under a prefix; `get(Model)` validates the section.
"""

T = TypeVar('T')


class RaiseOnMissingType(Enum):
    RAISE = 'raise'


raise_on_missing = RaiseOnMissingType.RAISE
_cla_type = type


def _parse_bool(value) -> bool:
    if isinstance(value, str):
        value = value.strip().lower()
        if value in ('no', 'false', 'n', 'f', 'off', 'none', 'null', '0', ''):
            return False
    return bool(value)


TYPE_CONVERTER: dict[type, typing.Callable[[Any], Any]] = {
    bool: _parse_bool,
    Path: lambda s: Path(str(s)).expanduser(),
    str: str,
}


def convert_to_type(value, type):
    """Convert a configuration value to the given type (pydantic models are validated)"""
    if issubclass(type, pydantic.BaseModel):
        return type.model_validate(value)
    if isinstance(value, type):
        return value
    if type in TYPE_CONVERTER:
        return TYPE_CONVERTER[type](value)
    return pydantic.TypeAdapter(type).validate_python(value)


class Configuration:
    c: DictConfig
    helpers: dict[str, str]
    _type_path: dict[type, str]
    _type_value: dict[type, Any]

    def __init__(self, *, parent: Optional["Configuration"] = None) -> None:
        if parent:
            self.c = OmegaConf.create(parent.c)
            self.helpers = copy.copy(parent.helpers)
            self._type_path = copy.copy(parent._type_path)
        else:
            self.c = OmegaConf.create({})
            self.helpers = {}
            self._type_path = {}
        self._type_value = {}

    @overload
    def get(
        self,
        key: str,
        type: type[T],
        *,
        default: Union[T, RaiseOnMissingType] = raise_on_missing,
    ) -> T: ...

    @overload
    def get(self, key: str, type: None = None, *, default: Any = raise_on_missing) -> Any: ...

    @overload
    def get(
        self,
        key: type[T],
        type: None = None,
        *,
        default: Union[T, RaiseOnMissingType] = raise_on_missing,
    ) -> T: ...

    def get(self, key: Union[str, type], type=None, *, default=raise_on_missing):
        """Read a value (or a registered pydantic section) and convert it to a type"""
        if isinstance(key, _cla_type):
            return self._get_type(key, default=default)
        value = OmegaConf.select(self.c, key, default=raise_on_missing)
        if value is raise_on_missing:
            if default is raise_on_missing:
                raise KeyError(f"No value for: {key}")
            return default
        if type is not None and isinstance(value, type):
            return value
        if isinstance(value, Container):
            value = OmegaConf.to_object(value)
        if type is not None:
            value = convert_to_type(value, type)
        return value

    def _get_type(self, key: type, *, default=raise_on_missing):
        if key in self._type_value:
            return self._type_value[key]
        path = self._type_path.get(key)
        if path is None:
            if default is raise_on_missing:
                raise KeyError(f"No section registered for {key.__name__}")
            return default
        value = self.get(path, key, default=default)
        self._type_value[key] = value
        return value

    def _merge(self, configs: Iterable[DictConfig]) -> None:
        self.c = cast(DictConfig, OmegaConf.merge(self.c, *configs))
        self._type_value.clear()

    def setup_configuration(
        self,
        conf: Union[DictConfig, dict, type[pydantic.BaseModel], pydantic.BaseModel],
        helpers: dict[str, str] = {},
        *,
        prefix: str = '',
    ) -> None:
        """Merge default values

        :param conf: A dict, a DictConfig, a pydantic model or an instance of one
        :param helpers: Descriptions of keys shown in the help
        :param prefix: Dotted path where the values are added
        """
        if isinstance(conf, type) and issubclass(conf, pydantic.BaseModel):
            self._type_path[conf] = prefix
            conf = self._model_defaults(conf, prefix)
        elif isinstance(conf, pydantic.BaseModel):
            self._type_path[type(conf)] = prefix
            self._model_defaults(type(conf), prefix)
            conf = conf.model_dump(mode='json')
        config = expand_dotted_keys(OmegaConf.create(conf))
        if prefix:
            config = _add_prefix(config, prefix)
            helpers = {f"{prefix}.{k}": v for k, v in helpers.items()}
        self._merge([config])
        self.helpers.update(helpers)

    def _model_defaults(self, model: type[pydantic.BaseModel], prefix: str) -> dict:
        defaults = {}
        for name, field in model.model_fields.items():
            if field.is_required():
                defaults[name] = '???'
            else:
                value = field.get_default(call_default_factory=True)
                if isinstance(value, Path):
                    value = str(value)
                elif isinstance(value, tuple):
                    value = list(value)
                defaults[name] = value
            if field.description:
                self.helpers[f"{prefix}.{name}" if prefix else name] = field.description
        return defaults

    def from_environ(self, prefixes: Iterable[str]) -> DictConfig:
        """Read environment variables with the given prefixes

        TRAIN_LEARNING_RATE=0.01 becomes train.learning_rate when that key exists.
        """
        from yaml.error import YAMLError  # type: ignore

        prefixes = tuple(prefixes)
        conf = OmegaConf.create({})
        for name, value in sorted(os.environ.items()):
            if not name.startswith(prefixes):
                continue
            key = Configuration._find_name(name.lower().strip('_').split('_'), self.c)
            try:
                conf.merge_with_dotlist([f"{key}={value}"])
            except YAMLError:
                OmegaConf.update(conf, key, value)
        return conf

    @staticmethod
    def _find_name(parts: list[str], conf: DictConfig) -> str:
        """Join parts with '.' or '_' so that they match existing keys"""
        if len(parts) < 2:
            return ''.join(parts)
        name = ''
        fallback = None
        for next_offset, part in enumerate(parts, 1):
            name = f"{name}_{part}" if name else part
            if name not in conf:
                continue
            if next_offset == len(parts):
                return name
            sub_conf = conf.get(name)
            if isinstance(sub_conf, DictConfig):
                return name + '.' + Configuration._find_name(parts[next_offset:], sub_conf)
            # a longer key may still match (param_y after param)
            fallback = fallback or '.'.join([name, *parts[next_offset:]])
        return fallback or '.'.join(parts)

    def to_dict(self, *, exclude: Iterable[str] = ('base',)) -> dict:
        """Resolved configuration as plain containers"""
        data = cast(dict, OmegaConf.to_container(self.c, resolve=True))
        for key in exclude:
            data.pop(key, None)
        return data


def _add_prefix(config: Any, prefix: str) -> DictConfig:
    for part in reversed(prefix.split('.')):
        config = OmegaConf.create({part: config})
    return config


def expand_dotted_keys(config: Any) -> Any:
    """Turn flat keys like `train.beta` into nested ones"""
    if not isinstance(config, DictConfig):
        return config
    nested = []
    for key, value in list(config.items_ex(resolve=False)):
        if isinstance(value, DictConfig):
            expanded = expand_dotted_keys(value)
            if expanded is not value:
                config[key] = value = expanded
        if isinstance(key, str) and '.' in key:
            config.pop(key)
            nested.append(_add_prefix(value, key))
    if nested:
        config = cast(DictConfig, OmegaConf.unsafe_merge(config, *nested))
    return config
