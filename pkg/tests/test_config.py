import dataclasses
import enum
import typing
from unittest import mock

import pytest

import bamboo
from bamboo import _config
from bamboo import errors


class Colour(enum.Enum):
    RED = "red"
    BLUE = "blue"


@dataclasses.dataclass(kw_only=True, frozen=True)
class InnerConfig(bamboo.ConfigModel):
    """A nested config for testing."""

    size: int
    scale: float = 1.0


@dataclasses.dataclass(kw_only=True, frozen=True)
class DemoConfig(bamboo.ConfigModel):
    """A demo config covering every supported field type."""

    name: str
    count: int = 1
    ratio: float = 0.5
    enabled: bool = True
    colour: Colour = Colour.RED
    limit: typing.Optional[int] = None
    seeds: typing.List[int] = dataclasses.field(default_factory=lambda: [0])
    inner: typing.Optional[InnerConfig] = None

    def __post_init__(self):
        if self.count < 0:
            raise errors.ConfigError("count must be >= 0")


def test_defaults_fill_missing_keys():
    """Keys left out of a record should take their field defaults."""
    config = DemoConfig.inflate({"name": "demo"})

    assert config == DemoConfig(name="demo")


def test_optional_but_set_values():
    """Optional and nested values that are set should survive a deflate and inflate."""
    config = DemoConfig(
        name="demo",
        count=3,
        colour=Colour.BLUE,
        limit=7,
        seeds=[1, 2],
        inner=InnerConfig(size=4, scale=2.0),
    )

    result = DemoConfig.inflate(config.deflate())

    assert result == config


def test_deflate_produces_plain_data():
    """Enums and nested configs should deflate to strings and mappings."""
    config = DemoConfig(name="demo", colour=Colour.BLUE, inner=InnerConfig(size=2))

    record = config.deflate()

    assert record["colour"] == "blue"
    assert record["inner"] == {"size": 2, "scale": 1.0}
    assert record["limit"] is None


def test_integers_are_accepted_for_floats():
    """A YAML integer should be accepted where a float is expected."""
    config = DemoConfig.inflate({"name": "demo", "ratio": 1})

    assert config.ratio == 1.0
    assert isinstance(config.ratio, float)


def test_unknown_keys_are_rejected():
    """A key that is not a field should raise rather than be ignored."""
    with pytest.raises(errors.UnknownKeyError) as info:
        DemoConfig.inflate({"name": "demo", "cuont": 2})

    assert "cuont" in str(info.value)


def test_unknown_keys_in_nested_configs_are_rejected():
    """Nested records should be held to the same rule."""
    with pytest.raises(errors.UnknownKeyError):
        DemoConfig.inflate({"name": "demo", "inner": {"size": 1, "colour": "red"}})


@pytest.mark.parametrize(
    "record",
    [
        {"name": "demo", "colour": "green"},
        {"name": "demo", "count": "3"},
        {"name": "demo", "count": True},
        {"name": "demo", "enabled": "yes"},
        {"name": "demo", "seeds": 3},
        {"name": None},
        {"name": "demo", "inner": [1]},
    ],
)
def test_bad_values_are_rejected(record):
    """Values of the wrong type should raise a ConfigError."""
    with pytest.raises(errors.ConfigError):
        DemoConfig.inflate(record)


def test_validation_runs_on_inflate_and_replace():
    """Field validation should run however the config is built."""
    config = DemoConfig(name="demo")

    with pytest.raises(errors.ConfigError):
        DemoConfig.inflate({"name": "demo", "count": -1})
    with pytest.raises(errors.ConfigError):
        config.replace(count=-1)
    assert config.replace(count=5).count == 5


@dataclasses.dataclass(kw_only=True, frozen=True)
class FunnyConfig(bamboo.ConfigModel):
    """A config that has unsupported types and doesn't build its own support."""

    funky: mock.MagicMock


def test_unsupported_type_encoding_errors():
    """When we are given an unsupported type to encode we should throw an error."""
    config = FunnyConfig(funky=mock.MagicMock())

    with pytest.raises(errors.UnsupportedTypeError):
        config.deflate()


def test_unsupported_type_decoding_errors():
    """When we are given an unsupported type to decode we should throw an error."""
    with pytest.raises(errors.UnsupportedTypeError):
        FunnyConfig.inflate({"funky": "magic"})


@dataclasses.dataclass(kw_only=True, frozen=True)
class CustomConfig(bamboo.ConfigModel):
    """A config that brings its own codec for an unsupported field."""

    shape: typing.Tuple[int, int]
    funky: complex = 0j

    def _serialize_funky(self) -> typing.List[float]:
        return [self.funky.real, self.funky.imag]

    @classmethod
    def _deserialize_funky(cls, value: typing.List[float]) -> complex:
        return complex(*value)


def test_custom_codecs_are_used():
    """Fields with their own serializer and deserializer should round trip."""
    config = CustomConfig(shape=(2, 3), funky=1 + 2j)

    record = config.deflate()

    assert record == {"shape": [2, 3], "funky": [1.0, 2.0]}
    assert CustomConfig.inflate(record) == config


def test_model_config_validation():
    """Model configs should reject shapes that cannot form a transformer."""
    with pytest.raises(errors.ConfigError):
        bamboo.ModelConfig(depth=2, width=10, heads=4, seq_len=4, patch_dim=3)
    with pytest.raises(errors.ConfigError):
        bamboo.ModelConfig(depth=0, width=8, heads=2, seq_len=4, patch_dim=3)
    with pytest.raises(errors.ConfigError):
        bamboo.ModelConfig(depth=1, width=8, heads=2, seq_len=4, patch_dim=3, head_mode=bamboo.HeadMode.CLS)
    with pytest.raises(errors.ConfigError):
        bamboo.ModelConfig(depth=1, width=8, heads=2, seq_len=4, patch_dim=3, vocab_bits=4)


def test_train_config_validation():
    """Train configs should reject settings Adam or masking cannot use."""
    with pytest.raises(errors.ConfigError):
        bamboo.TrainConfig(objective=bamboo.Objective.MAE, mask_ratio=1.0)
    with pytest.raises(errors.ConfigError):
        bamboo.TrainConfig(objective=bamboo.Objective.CLASSIFIER, beta1=1.0)
    with pytest.raises(errors.ConfigError):
        bamboo.TrainConfig(objective=bamboo.Objective.CLASSIFIER, learning_rate=0.0)


def test_read_document_parses_exponent_floats(tmp_path):
    """Exponents without a decimal point should read as numbers in YAML and JSON files."""
    yaml_path = tmp_path / "doc.yaml"
    yaml_path.write_text("learning_rate: 1e-3\neps: -2E+2\nname: 1e3x\ncount: 12\n")
    json_path = tmp_path / "doc.json"
    json_path.write_text('{"learning_rate": 1e-3, "eps": 1e-05}')

    assert _config.read_document(yaml_path) == {"learning_rate": 0.001, "eps": -200.0, "name": "1e3x", "count": 12}
    assert _config.read_document(json_path) == {"learning_rate": 0.001, "eps": 1e-05}


def test_read_document_errors(tmp_path):
    """Malformed files and non-mapping documents should raise config errors."""
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    listed = tmp_path / "listed.yaml"
    listed.write_text("- 1\n")

    with pytest.raises(errors.ConfigError):
        _config.read_document(broken)
    with pytest.raises(errors.ConfigError):
        _config.read_document(listed)
