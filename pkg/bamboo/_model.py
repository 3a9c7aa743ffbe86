import dataclasses
import enum
import json
import pathlib
import struct
import typing

import numpy as np

from bamboo import _config
from bamboo import _tensor
from bamboo import errors
from bamboo._tensor import Node

if typing.TYPE_CHECKING:
    from bamboo._train import MaskPlan


MAGIC = b"BMB1"
HEAD_PREFIX = "head."


class NormPlacement(enum.Enum):
    PRE = "pre"
    POST = "post"


class Activation(enum.Enum):
    RELU = "relu"
    GELU = "gelu"


class HeadMode(enum.Enum):
    CLS = "cls"
    MEAN_POOL = "mean_pool"


class Objective(enum.Enum):
    CLASSIFIER = "classifier"
    MAE = "mae"


@dataclasses.dataclass(kw_only=True, frozen=True)
class ModelConfig(_config.ConfigModel):
    """Shape and architecture switches of a transformer encoder."""

    depth: int
    width: int
    heads: int
    seq_len: int
    patch_dim: int
    num_classes: int = 2
    ffn_mult: int = 4
    norm_placement: NormPlacement = NormPlacement.PRE
    residual_enabled: bool = True
    activation: Activation = Activation.GELU
    head_mode: HeadMode = HeadMode.MEAN_POOL
    use_cls_token: bool = False
    # Reconstruct 2**vocab_bits token codes instead of raw patches when set.
    vocab_bits: typing.Optional[int] = None
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise errors.ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.seq_len < 2:
            raise errors.ConfigError(f"seq_len must be >= 2, got {self.seq_len}")
        if not self.width >= self.heads >= 1:
            raise errors.ConfigError(
                f"Need width >= heads >= 1, got width={self.width} heads={self.heads}"
            )
        if self.width % self.heads:
            raise errors.ConfigError(
                f"width {self.width} is not divisible by heads {self.heads};"
                " the head dimension must be integral"
            )
        if self.patch_dim < 1 or self.num_classes < 1 or self.ffn_mult < 1:
            raise errors.ConfigError("patch_dim, num_classes and ffn_mult must be >= 1")
        if self.head_mode is HeadMode.CLS and not self.use_cls_token:
            raise errors.ConfigError("head_mode 'cls' requires use_cls_token = true")
        if self.vocab_bits is not None and not 1 <= self.vocab_bits <= self.patch_dim:
            raise errors.ConfigError(
                f"vocab_bits must lie in [1, patch_dim={self.patch_dim}], got {self.vocab_bits}"
            )
        if self.layer_norm_eps <= 0:
            raise errors.ConfigError("layer_norm_eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def ffn_width(self) -> int:
        return self.ffn_mult * self.width

    @property
    def special_positions(self) -> typing.Tuple[int, ...]:
        """Positions of special tokens in the encoder sequence."""
        return (0,) if self.use_cls_token else ()

    @property
    def positions(self) -> int:
        """Length of the encoder sequence, special tokens included."""
        return self.seq_len + len(self.special_positions)

    @property
    def recon_dim(self) -> int:
        return 2**self.vocab_bits if self.vocab_bits else self.patch_dim


def parameter_shapes(config: ModelConfig) -> typing.List[typing.Tuple[str, typing.Tuple[int, ...]]]:
    """List every tensor of the model in declaration order."""
    d, f = config.width, config.ffn_width
    shapes = [
        ("embed.weight", (config.patch_dim, d)),
        ("embed.bias", (d,)),
        ("pos", (config.positions, d)),
    ]
    if config.use_cls_token:
        shapes.append(("cls", (d,)))
    shapes.append(("mask_token", (d,)))
    for i in range(config.depth):
        prefix = f"layers.{i}"
        shapes.extend(
            [
                (f"{prefix}.norm1.gain", (d,)),
                (f"{prefix}.norm1.bias", (d,)),
            ]
        )
        for proj in ("q", "k", "v", "o"):
            shapes.append((f"{prefix}.attn.{proj}.weight", (d, d)))
            shapes.append((f"{prefix}.attn.{proj}.bias", (d,)))
        shapes.extend(
            [
                (f"{prefix}.norm2.gain", (d,)),
                (f"{prefix}.norm2.bias", (d,)),
                (f"{prefix}.ffn.in.weight", (d, f)),
                (f"{prefix}.ffn.in.bias", (f,)),
                (f"{prefix}.ffn.out.weight", (f, d)),
                (f"{prefix}.ffn.out.bias", (d,)),
            ]
        )
    if config.norm_placement is NormPlacement.PRE:
        shapes.extend([("final_norm.gain", (d,)), ("final_norm.bias", (d,))])
    shapes.extend(
        [
            ("head.classifier.weight", (d, config.num_classes)),
            ("head.classifier.bias", (config.num_classes,)),
            ("head.recon.weight", (d, config.recon_dim)),
            ("head.recon.bias", (config.recon_dim,)),
        ]
    )
    return shapes


class Parameters:
    """The learnable tensors of one encoder and its heads, in declaration order."""

    def __init__(self, tensors: typing.Mapping[str, np.ndarray]):
        self.tensors: typing.Dict[str, np.ndarray] = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if value.shape != self.tensors[name].shape:
            raise errors.ShapeError(
                f"{name} expects shape {self.tensors[name].shape}, got {value.shape}"
            )
        self.tensors[name] = value

    def __iter__(self) -> typing.Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Parameters) or list(self) != list(other):
            return False
        return all(np.array_equal(self[n], other[n]) for n in self)

    def items(self) -> typing.ItemsView[str, np.ndarray]:
        return self.tensors.items()

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def size(self) -> int:
        """Count the scalar parameters."""
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "Parameters":
        return Parameters({n: t.copy() for n, t in self.items()})

    def astype(self, dtype: type) -> "Parameters":
        return Parameters({n: t.astype(dtype) for n, t in self.items()})

    def head_names(self) -> typing.List[str]:
        return [n for n in self if n.startswith(HEAD_PREFIX)]

    def encoder_names(self) -> typing.List[str]:
        return [n for n in self if not n.startswith(HEAD_PREFIX)]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())

    def as_nodes(self) -> typing.Dict[str, Node]:
        """Wrap every tensor as a trainable graph leaf."""
        return {n: _tensor.leaf(t) for n, t in self.items()}

    def save(self, path: typing.Union[str, pathlib.Path], config: ModelConfig) -> None:
        """
        Write the parameters to a single binary file.

        The layout is the magic `BMB1`, a little-endian uint32 byte length,
        the JSON config header, then every tensor in declaration order as
        little-endian 32-bit floats.
        """
        expected = parameter_shapes(config)
        if [(n, self[n].shape) for n in self] != expected:
            raise errors.ConfigMismatchError("Parameters do not match the given config")
        with open(path, "wb") as stream:
            write_header(stream, MAGIC, config.deflate())
            write_tensors(stream, self.tensors)

    @classmethod
    def load(
        cls, path: typing.Union[str, pathlib.Path], dtype: typing.Optional[type] = None
    ) -> typing.Tuple[ModelConfig, "Parameters"]:
        """Read a file written by `save`, returning its config and parameters."""
        blob = pathlib.Path(path).read_bytes()
        header, offset = read_header(blob, MAGIC, path)
        try:
            config = ModelConfig.inflate(header)
        except errors.ConfigError as err:
            raise errors.FormatError(f"{path} has an invalid config header: {err}") from None
        tensors, offset = read_tensors(blob, offset, parameter_shapes(config), path, dtype)
        if offset != len(blob):
            raise errors.FormatError(f"{path} has {len(blob) - offset} trailing bytes")
        return config, cls(tensors)


def write_header(stream: typing.BinaryIO, magic: bytes, header: typing.Mapping[str, typing.Any]) -> None:
    """Write a magic tag followed by a length-prefixed JSON header."""
    encoded = json.dumps(header, sort_keys=True).encode()
    stream.write(magic)
    stream.write(struct.pack("<I", len(encoded)))
    stream.write(encoded)


def write_tensors(stream: typing.BinaryIO, tensors: typing.Mapping[str, np.ndarray]) -> None:
    for tensor in tensors.values():
        stream.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def read_header(
    blob: bytes, magic: bytes, path: typing.Union[str, pathlib.Path]
) -> typing.Tuple[typing.Any, int]:
    """Check the magic tag and decode the JSON header, returning it with the offset after it."""
    if blob[: len(magic)] != magic:
        raise errors.FormatError(f"{path} is not a {magic.decode()} file (bad magic)")
    start = len(magic) + 4
    if len(blob) < start:
        raise errors.FormatError(f"{path} is truncated in its header")
    (length,) = struct.unpack_from("<I", blob, len(magic))
    if start + length > len(blob):
        raise errors.FormatError(f"{path} is truncated in its header")
    try:
        header = json.loads(blob[start : start + length])
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise errors.FormatError(f"{path} has a corrupt header: {err}") from None
    if not isinstance(header, dict):
        raise errors.FormatError(f"{path} has a header that is not a mapping")
    return header, start + length


def read_tensors(
    blob: bytes,
    offset: int,
    shapes: typing.Sequence[typing.Tuple[str, typing.Tuple[int, ...]]],
    path: typing.Union[str, pathlib.Path],
    dtype: typing.Optional[type] = None,
) -> typing.Tuple[typing.Dict[str, np.ndarray], int]:
    """Read little-endian float32 tensors in the given order, returning them with the next offset."""
    tensors = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        if offset + 4 * count > len(blob):
            raise errors.FormatError(f"{path} is truncated at tensor {name}")
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[name] = flat.reshape(shape).astype(dtype or _tensor.default_dtype())
        offset += 4 * count
    return tensors, offset


def build(config: ModelConfig, seed: int, dtype: typing.Optional[type] = None) -> Parameters:
    """
    Initialize parameters for `config`.

    Projection weights are Xavier-uniform, biases zero and norm gains one.
    Positional and CLS embeddings are Gaussian with standard deviation 0.02
    and the mask token starts at zero. Every tensor draws from its own
    stream, so the heads of two builds with the same seed are identical
    regardless of the encoder around them.
    """
    dtype = dtype or _tensor.default_dtype()
    tensors = {}
    for name, shape in parameter_shapes(config):
        rng = _tensor.rng_for(seed, name)
        if name.endswith(".weight"):
            tensors[name] = _tensor.linear_init(shape[0], shape[1], rng, dtype)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name in ("pos", "cls"):
            tensors[name] = (rng.standard_normal(shape) * 0.02).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return Parameters(tensors)


@dataclasses.dataclass(frozen=True)
class ActivationTrace:
    """Token representations captured during one forward pass."""

    # Block outputs h^0 (embedded input) through h^L, each [positions×d].
    hidden: typing.Tuple[np.ndarray, ...]
    # Per-block increments h^{l+1} - h^l with residuals, h^{l+1} without. In
    # post-norm models the increment includes both norms' rescaling, so it is
    # not the raw attention plus feed-forward output.
    branches: typing.Tuple[np.ndarray, ...]
    # Per-layer attention weights, [heads×positions×positions].
    attention: typing.Tuple[np.ndarray, ...]
    # Final representation the heads project (after the final norm in pre-norm models).
    head_input: np.ndarray
    masked: typing.Tuple[int, ...] = ()
    special: typing.Tuple[int, ...] = ()

    @property
    def depth(self) -> int:
        return len(self.hidden) - 1

    def layer(self, index: int) -> np.ndarray:
        return self.hidden[index]


@dataclasses.dataclass(frozen=True)
class ForwardResult:
    output: Node
    trace: typing.Optional[ActivationTrace] = None


def _linear(nodes: typing.Dict[str, Node], prefix: str, x: Node) -> Node:
    return _tensor.add_row(_tensor.matmul(x, nodes[f"{prefix}.weight"]), nodes[f"{prefix}.bias"])


def _norm(nodes: typing.Dict[str, Node], prefix: str, x: Node, eps: float) -> Node:
    return _tensor.layer_norm(x, nodes[f"{prefix}.gain"], nodes[f"{prefix}.bias"], eps)


def _attention_branch(
    nodes: typing.Dict[str, Node], prefix: str, x: Node, heads: int
) -> typing.Tuple[Node, np.ndarray]:
    q = _linear(nodes, f"{prefix}.attn.q", x)
    k = _linear(nodes, f"{prefix}.attn.k", x)
    v = _linear(nodes, f"{prefix}.attn.v", x)
    attended, weights = _tensor.multi_head_attention(q, k, v, heads)
    return _linear(nodes, f"{prefix}.attn.o", attended), weights


def _ffn_branch(nodes: typing.Dict[str, Node], prefix: str, x: Node, kind: str) -> Node:
    hidden = _tensor.activation(_linear(nodes, f"{prefix}.ffn.in", x), kind)
    return _linear(nodes, f"{prefix}.ffn.out", hidden)


def _block(
    nodes: typing.Dict[str, Node], config: ModelConfig, index: int, h: Node
) -> typing.Tuple[Node, np.ndarray]:
    prefix = f"layers.{index}"
    eps = config.layer_norm_eps
    kind = config.activation.value
    residual = config.residual_enabled

    def join(base: Node, branch: Node) -> Node:
        return _tensor.add(base, branch) if residual else branch

    if config.norm_placement is NormPlacement.PRE:
        attended, weights = _attention_branch(
            nodes, prefix, _norm(nodes, f"{prefix}.norm1", h, eps), config.heads
        )
        h = join(h, attended)
        h = join(h, _ffn_branch(nodes, prefix, _norm(nodes, f"{prefix}.norm2", h, eps), kind))
    else:
        attended, weights = _attention_branch(nodes, prefix, h, config.heads)
        h = _norm(nodes, f"{prefix}.norm1", join(h, attended), eps)
        h = _norm(nodes, f"{prefix}.norm2", join(h, _ffn_branch(nodes, prefix, h, kind)), eps)
    return h, weights


def _embed(
    nodes: typing.Dict[str, Node],
    config: ModelConfig,
    tokens: np.ndarray,
    mask: typing.Optional["MaskPlan"],
) -> Node:
    x = _tensor.add_row(_tensor.matmul(tokens, nodes["embed.weight"]), nodes["embed.bias"])
    if config.use_cls_token:
        x = _tensor.concat_rows(_tensor.reshape(nodes["cls"], (1, config.width)), x)
    if mask is not None:
        token = _tensor.reshape(nodes["mask_token"], (1, config.width))
        fill = _tensor.take_rows(token, [0] * len(mask.positions))
        x = _tensor.replace_rows(x, mask.positions, fill)
    return _tensor.add(x, nodes["pos"])


def _pool(config: ModelConfig, features: Node, mode: HeadMode) -> Node:
    if mode is HeadMode.CLS:
        if not config.use_cls_token:
            raise errors.ConfigError("cls head mode needs a model with a CLS token")
        return _tensor.take_rows(features, [0])
    offset = len(config.special_positions)
    if offset:
        features = _tensor.take_rows(features, range(offset, config.positions))
    return _tensor.mean_rows(features)


def _classify(nodes: typing.Dict[str, Node], config: ModelConfig, features: Node, mode: HeadMode) -> Node:
    return _linear(nodes, "head.classifier", _pool(config, features, mode))


def _reconstruct(nodes: typing.Dict[str, Node], features: Node, positions: typing.Sequence[int]) -> Node:
    if not len(positions):
        raise errors.EmptyMaskError("Cannot reconstruct an empty mask")
    return _linear(nodes, "head.recon", _tensor.take_rows(features, positions))


def _validate_inputs(
    config: ModelConfig, tokens: np.ndarray, mask: typing.Optional["MaskPlan"]
) -> None:
    if tokens.shape != (config.seq_len, config.patch_dim):
        raise errors.ShapeError(
            f"Tokens of shape {tokens.shape} do not match"
            f" [seq_len={config.seq_len} x patch_dim={config.patch_dim}]"
        )
    if mask is not None:
        bad = [p for p in mask.positions if not 0 <= p < config.positions]
        bad += [p for p in mask.positions if p in config.special_positions]
        if bad:
            raise errors.ShapeError(f"Mask positions {sorted(set(bad))} are not maskable")


def forward_graph(
    nodes: typing.Dict[str, Node],
    config: ModelConfig,
    tokens: np.ndarray,
    mask: typing.Optional["MaskPlan"] = None,
    capture: bool = False,
    objective: typing.Optional[Objective] = None,
) -> ForwardResult:
    """
    Run the encoder on graph nodes so the result can be differentiated.

    :param nodes:
        One node per parameter tensor, keyed by name.
    :param objective:
        `classifier` returns `[1×C]` logits, `mae` returns `[|mask|×r]`
        reconstructions. Defaults to `mae` when a mask is given.
    """
    objective = objective or (Objective.MAE if mask is not None else Objective.CLASSIFIER)
    if objective is Objective.CLASSIFIER and mask is not None:
        raise errors.ConfigError("A mask was supplied to the classifier objective, which has no reconstruction target")
    if objective is Objective.MAE and mask is None:
        raise errors.EmptyMaskError("The mae objective needs a mask")
    dtype = nodes["embed.weight"].value.dtype
    tokens = np.asarray(tokens, dtype=dtype)
    _validate_inputs(config, tokens, mask)

    h = _embed(nodes, config, tokens, mask)
    hidden, branches, attention = [h.value], [], []
    for index in range(config.depth):
        previous = h
        h, weights = _block(nodes, config, index, h)
        if capture:
            hidden.append(h.value)
            branches.append(h.value - previous.value if config.residual_enabled else h.value)
            attention.append(weights)
    features = h
    if config.norm_placement is NormPlacement.PRE:
        features = _norm(nodes, "final_norm", h, config.layer_norm_eps)

    if objective is Objective.CLASSIFIER:
        output = _classify(nodes, config, features, config.head_mode)
    else:
        output = _reconstruct(nodes, features, mask.positions)

    trace = None
    if capture:
        trace = ActivationTrace(
            hidden=tuple(hidden),
            branches=tuple(branches),
            attention=tuple(attention),
            head_input=features.value,
            masked=tuple(mask.positions) if mask is not None else (),
            special=config.special_positions,
        )
    return ForwardResult(output=output, trace=trace)


def forward(
    params: Parameters,
    config: ModelConfig,
    tokens: np.ndarray,
    mask: typing.Optional["MaskPlan"] = None,
    capture: bool = False,
    objective: typing.Optional[Objective] = None,
) -> typing.Tuple[typing.Optional[ActivationTrace], np.ndarray]:
    """
    Evaluate the model without tracking gradients.

    :returns:
        The trace (None unless `capture`) and the output: logits `[C]` for
        the classifier objective, reconstructions `[|mask|×r]` for mae.
    """
    nodes = {n: _tensor.constant(t) for n, t in params.items()}
    result = forward_graph(nodes, config, tokens, mask, capture, objective)
    if mask is None:
        return result.trace, result.output.value[0]
    return result.trace, result.output.value


def classification_head(
    params: Parameters, config: ModelConfig, trace: ActivationTrace, mode: typing.Optional[HeadMode] = None
) -> np.ndarray:
    """Project the final representation of a trace to `[C]` logits."""
    nodes = {n: _tensor.constant(params[n]) for n in params.head_names()}
    features = _tensor.constant(trace.head_input)
    return _classify(nodes, config, features, mode or config.head_mode).value[0]


def reconstruction_head(params: Parameters, trace: ActivationTrace, mask: "MaskPlan") -> np.ndarray:
    """Project the final representation at the masked positions of a trace."""
    nodes = {n: _tensor.constant(params[n]) for n in params.head_names()}
    return _reconstruct(nodes, _tensor.constant(trace.head_input), mask.positions).value
