import numpy as np
import pytest
import yaml

import bamboo
from bamboo import _data
from bamboo import errors

from ._utils import FIXTURES


def _default_spec(**overrides):
    record = yaml.safe_load((FIXTURES / "synthetic.yaml").read_text())
    record.update(overrides)
    return bamboo.SyntheticSpec.inflate(record)


@pytest.mark.parametrize(
    "overrides",
    [
        {"seq_len": 3},
        {"num_classes": 1},
        {"num_classes": 17},
        {"max_freq": 16},
        {"max_freq": 0},
        {"noise_sigma": -0.1},
        {"components": 0},
    ],
)
def test_invalid_specs_error(overrides):
    """Specs that break the correlation or labelling assumptions should be rejected."""
    with pytest.raises(errors.ConfigError):
        _default_spec(**overrides)


def test_generation_is_deterministic_and_prefix_stable():
    """The same spec should give identical bytes, and a longer draw should extend a shorter one."""
    spec = _default_spec()

    first = bamboo.generate(spec, 20, dtype=np.float64)
    second = bamboo.generate(spec, 20, dtype=np.float64)
    longer = bamboo.generate(spec, 30, dtype=np.float64)

    assert first.tokens.tobytes() == second.tokens.tobytes()
    assert np.array_equal(first.labels, second.labels)
    assert np.array_equal(longer.tokens[:20], first.tokens)
    assert first.tokens.shape == (20, 32, 16)


def test_different_seeds_give_different_data():
    """Changing the seed should change the data."""
    a = bamboo.generate(_default_spec(), 5)
    b = bamboo.generate(_default_spec(seed=1), 5)

    assert not np.array_equal(a.tokens, b.tokens)


def test_prototypes_are_orthonormal():
    """Class prototypes should be unit length and mutually orthogonal."""
    protos = _data.prototypes(_default_spec())

    assert protos.shape == (4, 16)
    assert np.allclose(protos @ protos.T, np.eye(4), atol=1e-12)


def test_oracle_is_perfect_without_noise():
    """With no noise the token mean identifies the class exactly."""
    dataset = bamboo.generate(_default_spec(), 1000, dtype=np.float64)

    assert _data.oracle_accuracy(dataset) == 1.0
    assert all(
        bamboo.oracle_label(tokens, dataset.prototypes) == label
        for tokens, label in zip(dataset.tokens, dataset.labels)
    )


def test_oracle_survives_moderate_noise():
    """At noise 0.1 the oracle should stay at least 90% accurate."""
    dataset = bamboo.generate(_default_spec(noise_sigma=0.1), 500, dtype=np.float64)

    assert _data.oracle_accuracy(dataset) >= 0.9


def test_oracle_label_examples():
    """Repeated prototypes give their class and zeros fall to class 0."""
    protos = _data.prototypes(_default_spec())

    assert bamboo.oracle_label(np.tile(protos[2], (8, 1)), protos) == 2
    assert bamboo.oracle_label(np.zeros((8, 16)), protos) == 0


def test_all_classes_appear():
    """Labels should be drawn from every class."""
    dataset = bamboo.generate(_default_spec(), 200)

    assert set(dataset.labels.tolist()) == {0, 1, 2, 3}


def test_neighbouring_tokens_are_correlated():
    """Lag-1 autocorrelation should exceed 0.5 at the default spec."""
    dataset = bamboo.generate(_default_spec(), 200, dtype=np.float64)

    assert _data.autocorrelation(dataset) > 0.5


def test_masked_tokens_are_predictable_from_context():
    """Averaging the two neighbours should beat the mean token by at least 30%."""
    dataset = bamboo.generate(_default_spec(noise_sigma=0.1), 200, dtype=np.float64)

    interpolated, constant = _data.interpolation_baseline(dataset)

    assert interpolated <= 0.7 * constant


def test_split_keeps_the_stream_order():
    """The first 80% of the stream trains and the rest tests."""
    dataset = bamboo.generate(_default_spec(), 10)

    train, test = dataset.split()

    assert len(train) == 8 and len(test) == 2
    assert np.array_equal(test.tokens, dataset.tokens[8:])
    assert test.prototypes is dataset.prototypes


def test_dump_and_load(tmp_path):
    """A dump should store the header, float32 tokens and int32 labels."""
    spec = _default_spec()
    dataset = bamboo.generate(spec, 6)
    path = tmp_path / "data.bin"

    _data.dump(dataset, path, spec.num_classes)
    loaded, num_classes = _data.load(path, dtype=np.float32)

    assert num_classes == 4
    assert path.stat().st_size == 16 + 4 * 6 * 32 * 16 + 4 * 6
    assert np.array_equal(loaded.tokens, dataset.tokens.astype(np.float32))
    assert np.array_equal(loaded.labels, dataset.labels)


def test_load_rejects_damaged_dumps(tmp_path):
    """Dumps whose size disagrees with their header should raise."""
    path = tmp_path / "data.bin"
    _data.dump(bamboo.generate(_default_spec(), 2), path, 4)
    path.write_bytes(path.read_bytes()[:-1])

    with pytest.raises(errors.FormatError):
        _data.load(path)
    path.write_bytes(b"\0" * 8)
    with pytest.raises(errors.FormatError):
        _data.load(path)


def test_dataset_requires_paired_labels():
    """Tokens and labels must pair up."""
    with pytest.raises(errors.ShapeError):
        _data.Dataset(np.zeros((3, 4, 2)), np.zeros(2, dtype=np.int64))
