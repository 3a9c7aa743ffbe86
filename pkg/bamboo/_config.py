import dataclasses
import enum
import json
import pathlib
import re
import types
import typing

import yaml

from bamboo import errors


def _decode_int(value: typing.Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise errors.ConfigError(f"Expected an integer but got {value!r}")
    return value


def _decode_float(value: typing.Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise errors.ConfigError(f"Expected a number but got {value!r}")
    return float(value)


def _decode_bool(value: typing.Any) -> bool:
    if not isinstance(value, bool):
        raise errors.ConfigError(f"Expected true/false but got {value!r}")
    return value


def _decode_str(value: typing.Any) -> str:
    if not isinstance(value, str):
        raise errors.ConfigError(f"Expected a string but got {value!r}")
    return value


_TYPE_ENCODERS = {
    int: lambda x: x,
    float: lambda x: x,
    str: lambda x: x,
    bool: lambda x: x,
}

_TYPE_DECODERS = {
    int: _decode_int,
    float: _decode_float,
    str: _decode_str,
    bool: _decode_bool,
}


def _unwrap_optional(type_: typing.Any) -> typing.Tuple[typing.Any, bool]:
    """Strip `Optional[...]` from a type, reporting whether it was there."""
    origin = typing.get_origin(type_)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(type_) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return type_, False


def _encode(type_: typing.Any, value: typing.Any, name: str) -> typing.Any:
    """Encode a value into plain data."""
    if value is None:
        return None
    type_, _ = _unwrap_optional(type_)
    origin = typing.get_origin(type_)
    if origin in (list, tuple):
        (inner, *_) = typing.get_args(type_) or (typing.Any,)
        return [_encode(inner, v, name) for v in value]
    if isinstance(type_, type) and issubclass(type_, enum.Enum):
        return value.value
    if isinstance(type_, type) and issubclass(type_, ConfigModel):
        return value.deflate()
    if encoder := _TYPE_ENCODERS.get(type_):
        return encoder(value)
    raise errors.UnsupportedTypeError(
        f"Unsupported type {type_} for field {name}"
        " consider defining a custom serializer by adding the following method:"
        f"`_serialize_{name}(self) -> typing.Any`"
    )


def _decode(type_: typing.Any, value: typing.Any, name: str) -> typing.Any:
    """Decode plain data into a typed value."""
    type_, optional = _unwrap_optional(type_)
    if value is None:
        if optional:
            return None
        raise errors.ConfigError(f"Field {name} may not be null")
    origin = typing.get_origin(type_)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise errors.ConfigError(f"Field {name} expects a list but got {value!r}")
        (inner, *_) = typing.get_args(type_) or (typing.Any,)
        return origin(_decode(inner, v, name) for v in value)
    if isinstance(type_, type) and issubclass(type_, enum.Enum):
        try:
            return type_(value)
        except ValueError:
            allowed = ", ".join(str(m.value) for m in type_)
            raise errors.ConfigError(
                f"Field {name} must be one of {allowed} but got {value!r}"
            ) from None
    if isinstance(type_, type) and issubclass(type_, ConfigModel):
        if not isinstance(value, dict):
            raise errors.ConfigError(f"Field {name} expects a mapping but got {value!r}")
        return type_.inflate(value)
    if decoder := _TYPE_DECODERS.get(type_):
        try:
            return decoder(value)
        except errors.ConfigError as err:
            raise errors.ConfigError(f"Field {name}: {err}") from None
    raise errors.UnsupportedTypeError(
        f"Unsupported type {type_} for field {name}"
        " consider defining a custom deserializer by adding the following method:"
        f"`_deserialize_{name}(cls, value) -> {type_}`"
    )


@dataclasses.dataclass(kw_only=True, frozen=True)
class ConfigModel:
    """Base class for configuration records read from experiment files."""

    @classmethod
    def __managed_fields(cls) -> typing.List[dataclasses.Field]:
        return [f for f in dataclasses.fields(cls) if f.init]

    @classmethod
    def __hints(cls) -> typing.Dict[str, typing.Any]:
        return typing.get_type_hints(cls)

    @classmethod
    def inflate(cls, record: typing.Mapping[str, typing.Any]) -> "ConfigModel":
        """
        Build a config from a plain mapping.

        Keys missing from the mapping take the field default. Keys that are
        not fields are rejected, since a silent typo would change an
        experiment without anyone noticing.
        """
        fields = {f.name: f for f in cls.__managed_fields()}
        unknown = sorted(set(record) - set(fields))
        if unknown:
            raise errors.UnknownKeyError(
                f"Unknown key(s) {', '.join(unknown)} for {cls.__name__};"
                f" expected a subset of {', '.join(sorted(fields))}"
            )
        hints = cls.__hints()
        values = {}
        for name, value in record.items():
            custom = getattr(cls, f"_deserialize_{name}", None)
            values[name] = custom(value) if custom else _decode(hints[name], value, name)
        return cls(**values)

    def deflate(self) -> typing.Dict[str, typing.Any]:
        """Convert the config into plain data suitable for JSON or YAML."""
        hints = self.__hints()
        result = {}
        for field in self.__managed_fields():
            custom = getattr(self, f"_serialize_{field.name}", None)
            value = getattr(self, field.name)
            result[field.name] = (
                custom() if custom else _encode(hints[field.name], value, field.name)
            )
        return result

    def replace(self, **changes: typing.Any) -> "ConfigModel":
        """Copy the config with some fields changed, re-running validation."""
        return dataclasses.replace(self, **changes)


class DocumentLoader(yaml.SafeLoader):
    """Safe YAML loading that also reads `1e-3` as a float, as JSON and YAML 1.2 do."""


DocumentLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def read_document(path: typing.Union[str, pathlib.Path]) -> typing.Dict[str, typing.Any]:
    """Read a YAML or JSON file that must hold a mapping."""
    path = pathlib.Path(path)
    with open(path) as stream:
        if path.suffix == ".json":
            try:
                document = json.load(stream)
            except json.JSONDecodeError as err:
                raise errors.ConfigError(f"{path} is not valid JSON: {err}") from None
        else:
            try:
                document = yaml.load(stream, Loader=DocumentLoader)
            except yaml.YAMLError as err:
                raise errors.ConfigError(f"{path} is not valid YAML: {err}") from None
    if not isinstance(document, dict):
        raise errors.ConfigError(f"{path} must hold a mapping at the top level")
    return document
