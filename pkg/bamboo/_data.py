"""
Synthetic sequences whose label is global and whose tokens are locally correlated.

Each sequence is a class prototype plus a handful of low-frequency sinusoids
per feature. The sinusoids complete whole cycles over the sequence, so they
vanish from the token mean and the label can be read off the mean alone,
while neighbouring tokens stay correlated enough for masked tokens to be
recoverable from context.
"""
import dataclasses
import pathlib
import struct
import typing

import numpy as np

from bamboo import _config
from bamboo import _tensor
from bamboo import errors


TRAIN_FRACTION = 0.8
_HEADER = struct.Struct("<4I")


@dataclasses.dataclass(kw_only=True, frozen=True)
class SyntheticSpec(_config.ConfigModel):
    """Shape and noise of a synthetic sequence distribution."""

    seq_len: int
    patch_dim: int
    num_classes: int
    components: int = 4
    max_freq: int = 3
    amplitude: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.seq_len < 4:
            raise errors.ConfigError(f"seq_len must be >= 4, got {self.seq_len}")
        if self.num_classes < 2:
            raise errors.ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > self.patch_dim:
            raise errors.ConfigError(
                f"{self.num_classes} orthogonal prototypes do not fit in {self.patch_dim} dims"
            )
        if not 1 <= self.max_freq < self.seq_len / 2:
            raise errors.ConfigError(
                f"max_freq must lie in [1, seq_len/2), got {self.max_freq} for seq_len {self.seq_len}"
            )
        if self.components < 1 or self.amplitude < 0 or self.noise_sigma < 0:
            raise errors.ConfigError("components must be >= 1 and amplitude/noise_sigma >= 0")


@dataclasses.dataclass(frozen=True)
class Dataset:
    """Sequences `[n×T×p]` with one integer label each."""

    tokens: np.ndarray
    labels: np.ndarray
    prototypes: typing.Optional[np.ndarray] = None

    def __post_init__(self):
        if self.tokens.ndim != 3 or len(self.tokens) != len(self.labels):
            raise errors.ShapeError(
                f"Tokens {self.tokens.shape} and labels {self.labels.shape} do not pair up"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index: typing.Union[slice, np.ndarray]) -> "Dataset":
        return Dataset(self.tokens[index], self.labels[index], self.prototypes)

    def split(self, fraction: float = TRAIN_FRACTION) -> typing.Tuple["Dataset", "Dataset"]:
        """Split into the first `fraction` of the stream and the rest."""
        cut = int(round(len(self) * fraction))
        return self.subset(slice(0, cut)), self.subset(slice(cut, len(self)))


def prototypes(spec: SyntheticSpec) -> np.ndarray:
    """Orthonormal class prototypes, one row per class."""
    rng = _tensor.rng_for(spec.seed, "prototypes")
    basis, _ = np.linalg.qr(rng.standard_normal((spec.patch_dim, spec.num_classes)))
    return basis.T.copy()


def _sequence(spec: SyntheticSpec, protos: np.ndarray, index: int) -> typing.Tuple[np.ndarray, int]:
    rng = _tensor.rng_for(spec.seed, "sequence", index)
    label = int(rng.integers(spec.num_classes))
    t = np.arange(spec.seq_len)[:, None, None]
    freqs = rng.integers(1, spec.max_freq + 1, size=(1, spec.components, 1))
    amps = rng.normal(0.0, spec.amplitude / np.sqrt(spec.components), size=(1, spec.components, spec.patch_dim))
    phases = rng.uniform(0.0, 2 * np.pi, size=(1, spec.components, spec.patch_dim))
    waves = (amps * np.sin(2 * np.pi * freqs * t / spec.seq_len + phases)).sum(axis=1)
    noise = rng.normal(0.0, spec.noise_sigma, size=waves.shape) if spec.noise_sigma else 0.0
    return protos[label] + waves + noise, label


def generate(spec: SyntheticSpec, n: int, dtype: typing.Optional[type] = None) -> Dataset:
    """
    Draw `n` sequences.

    Sequence i depends only on (spec, i), so a longer dataset extends a
    shorter one with the same spec.
    """
    if n < 1:
        raise errors.ConfigError(f"Need at least one sequence, got n={n}")
    protos = prototypes(spec)
    tokens = np.empty((n, spec.seq_len, spec.patch_dim))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        tokens[i], labels[i] = _sequence(spec, protos, i)
    return Dataset(tokens.astype(dtype or _tensor.default_dtype()), labels, protos)


def oracle_label(tokens: np.ndarray, protos: np.ndarray) -> int:
    """Pick the prototype with the largest dot product with the mean token; ties go low."""
    scores = protos @ np.asarray(tokens, dtype=np.float64).mean(axis=0)
    return int(np.argmax(scores))


def oracle_accuracy(dataset: Dataset) -> float:
    hits = sum(
        oracle_label(tokens, dataset.prototypes) == label
        for tokens, label in zip(dataset.tokens, dataset.labels)
    )
    return hits / len(dataset)


def autocorrelation(dataset: Dataset, lag: int = 1) -> float:
    """Mean lag-`lag` autocorrelation of each feature along the sequence."""
    x = np.asarray(dataset.tokens, dtype=np.float64)
    x = x - x.mean(axis=1, keepdims=True)
    numerator = (x[:, :-lag] * x[:, lag:]).sum(axis=1)
    denominator = (x**2).sum(axis=1)
    valid = denominator > 0
    return float((numerator[valid] / denominator[valid]).mean())


def interpolation_baseline(dataset: Dataset) -> typing.Tuple[float, float]:
    """
    Score two predictors of interior tokens from their context.

    :returns:
        MSE of averaging the two neighbours, and MSE of predicting the
        dataset's mean token.
    """
    x = np.asarray(dataset.tokens, dtype=np.float64)
    interior = x[:, 1:-1]
    neighbours = 0.5 * (x[:, :-2] + x[:, 2:])
    mean_token = x.mean(axis=(0, 1))
    return (
        float(((interior - neighbours) ** 2).mean()),
        float(((interior - mean_token) ** 2).mean()),
    )


def dump(dataset: Dataset, path: typing.Union[str, pathlib.Path], num_classes: int) -> None:
    """
    Write a dataset as a header (T, p, C, n) of little-endian uint32s, the
    tokens as float32 and one int32 label per sequence.
    """
    n, seq_len, patch_dim = dataset.tokens.shape
    with open(path, "wb") as stream:
        stream.write(_HEADER.pack(seq_len, patch_dim, num_classes, n))
        stream.write(np.ascontiguousarray(dataset.tokens, dtype="<f4").tobytes())
        stream.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())


def load(path: typing.Union[str, pathlib.Path], dtype: typing.Optional[type] = None) -> typing.Tuple[Dataset, int]:
    """Read a dump, returning the dataset and its class count."""
    blob = pathlib.Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise errors.FormatError(f"{path} is too short for a dataset header")
    seq_len, patch_dim, num_classes, n = _HEADER.unpack_from(blob)
    token_count = n * seq_len * patch_dim
    expected = _HEADER.size + 4 * token_count + 4 * n
    if len(blob) != expected:
        raise errors.FormatError(f"{path} holds {len(blob)} bytes, expected {expected}")
    tokens = np.frombuffer(blob, dtype="<f4", count=token_count, offset=_HEADER.size)
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=_HEADER.size + 4 * token_count)
    return (
        Dataset(
            tokens.reshape(n, seq_len, patch_dim).astype(dtype or _tensor.default_dtype()),
            labels.astype(np.int64),
        ),
        num_classes,
    )
