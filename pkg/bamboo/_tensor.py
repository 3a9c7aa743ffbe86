"""
Dense matrix numerics with a reverse-mode autodiff graph.

Values are numpy arrays. Every operation returns a `Node` that remembers its
parents and a backward rule; `backward` walks the graph in reverse
topological order and accumulates gradients into every node that requires
them. Only the handful of operations a transformer encoder needs are
provided.
"""
import contextlib
import contextvars
import os
import typing
import zlib

import numpy as np

from bamboo import errors


Matrix = np.ndarray

PRECISION_ENV = "BAMBOO_PRECISION"
_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_override: contextvars.ContextVar = contextvars.ContextVar("precision", default=None)

ACTIVATIONS = ("relu", "gelu")
_GELU_C = float(np.sqrt(2.0 / np.pi))


def _resolve_precision(name: str) -> type:
    try:
        return _PRECISIONS[name]
    except KeyError:
        raise errors.ConfigError(
            f"Unknown precision {name!r}; expected one of {', '.join(_PRECISIONS)}"
        ) from None


def default_dtype() -> type:
    """
    Get the float type new arrays are created with.

    A `precision` context wins over the `BAMBOO_PRECISION` environment
    variable, which wins over the 32-bit default.
    """
    name = _override.get() or os.environ.get(PRECISION_ENV) or "f32"
    return _resolve_precision(name)


@contextlib.contextmanager
def precision(name: str):
    """Use the given precision (`f32` or `f64`) for arrays created within the block."""
    _resolve_precision(name)
    token = _override.set(name)
    try:
        yield
    finally:
        _override.reset(token)


def rng_for(seed: int, *labels: typing.Union[str, int]) -> np.random.Generator:
    """
    Build an independent generator for a named stream under a seed.

    The same (seed, labels) always yields the same stream, and adding a new
    stream never shifts the draws of an existing one.
    """
    words = [seed & 0xFFFFFFFF]
    for label in labels:
        words.append(zlib.crc32(label.encode()) if isinstance(label, str) else label)
    return np.random.default_rng(np.random.SeedSequence(words))


class Node:
    """A value in the computation graph together with its gradient."""

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "op")

    def __init__(
        self,
        value: Matrix,
        parents: typing.Sequence["Node"] = (),
        backward_rule: typing.Optional[typing.Callable[[Matrix], None]] = None,
        requires_grad: bool = False,
        op: str = "leaf",
    ):
        self.value = value
        self.grad: typing.Optional[Matrix] = None
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.op = op

    def __repr__(self) -> str:
        return f"<Node {self.op} shape={self.value.shape} dtype={self.value.dtype}>"

    @property
    def shape(self) -> typing.Tuple[int, ...]:
        return self.value.shape

    def accumulate(self, grad: Matrix) -> None:
        """Add an incoming gradient contribution."""
        if not self.requires_grad:
            return
        if grad.shape != self.value.shape:
            raise errors.ShapeError(
                f"Gradient of shape {grad.shape} does not match value {self.value.shape}"
                f" in {self.op}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.value.dtype, copy=True)
        else:
            self.grad += grad


NodeLike = typing.Union[Node, Matrix, float]


def leaf(value: typing.Any, dtype: typing.Optional[type] = None) -> Node:
    """Wrap an array as a trainable graph input."""
    return Node(_as_array(value, dtype), requires_grad=True)


def constant(value: typing.Any, dtype: typing.Optional[type] = None) -> Node:
    """Wrap an array as a graph input that receives no gradient."""
    return Node(_as_array(value, dtype), requires_grad=False, op="constant")


def _as_array(value: typing.Any, dtype: typing.Optional[type]) -> Matrix:
    if isinstance(value, np.ndarray) and dtype is None:
        return value
    if dtype is None:
        dtype = default_dtype()
    return np.asarray(value, dtype=dtype)


def _as_node(value: NodeLike) -> Node:
    if isinstance(value, Node):
        return value
    return constant(value)


def _check_finite(value: Matrix, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise errors.NonFiniteError(f"{op} produced non-finite values")


def _make(
    value: Matrix,
    parents: typing.Sequence[Node],
    rule: typing.Callable[[Matrix], None],
    op: str,
) -> Node:
    _check_finite(value, op)
    requires_grad = any(p.requires_grad for p in parents)
    return Node(
        value,
        parents=parents,
        backward_rule=rule if requires_grad else None,
        requires_grad=requires_grad,
        op=op,
    )


def _topological_order(root: Node) -> typing.List[Node]:
    order: typing.List[Node] = []
    visited: typing.Set[int] = set()
    stack: typing.List[typing.Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Node, grad: typing.Optional[Matrix] = None) -> None:
    """
    Propagate gradients from `root` to every node that requires them.

    :param root:
        The node to differentiate, usually a scalar loss.
    :param grad:
        The gradient of the final objective with respect to `root`; ones when
        omitted.
    """
    if not root.requires_grad:
        return
    seed = np.ones_like(root.value) if grad is None else grad
    root.accumulate(seed)
    for node in reversed(_topological_order(root)):
        if node.backward_rule is not None and node.grad is not None:
            node.backward_rule(node.grad)


def product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    `a @ b` over the last two axes.

    In float64 the sum over the shared axis runs left to right, one term at a
    time, so results do not depend on how the BLAS build blocks its sums.
    """
    if a.dtype != np.float64 and b.dtype != np.float64:
        return a @ b
    out = np.zeros(a.shape[:-1] + b.shape[-1:], dtype=np.float64)
    for j in range(a.shape[-1]):
        out += a[..., :, j : j + 1] * b[..., j : j + 1, :]
    return out


def matmul(a: NodeLike, b: NodeLike) -> Node:
    """Matrix product of `[m×k]` and `[k×n]`."""
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise errors.ShapeError(f"Cannot multiply {a.shape} by {b.shape}")

    def rule(g: Matrix) -> None:
        a.accumulate(product(g, b.value.T))
        b.accumulate(product(a.value.T, g))

    return _make(product(a.value, b.value), (a, b), rule, "matmul")


def transpose(a: NodeLike) -> Node:
    a = _as_node(a)

    def rule(g: Matrix) -> None:
        a.accumulate(g.T)

    return _make(a.value.T, (a,), rule, "transpose")


def add(a: NodeLike, b: NodeLike) -> Node:
    """Elementwise sum of two equally shaped values."""
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise errors.ShapeError(f"Cannot add {a.shape} and {b.shape}")

    def rule(g: Matrix) -> None:
        a.accumulate(g)
        b.accumulate(g)

    return _make(a.value + b.value, (a, b), rule, "add")


def sub(a: NodeLike, b: NodeLike) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise errors.ShapeError(f"Cannot subtract {b.shape} from {a.shape}")

    def rule(g: Matrix) -> None:
        a.accumulate(g)
        b.accumulate(-g)

    return _make(a.value - b.value, (a, b), rule, "sub")


def add_row(a: NodeLike, row: NodeLike) -> Node:
    """Add the vector `row` to every row of `a`."""
    a, row = _as_node(a), _as_node(row)
    if a.value.ndim != 2 or row.value.shape != (a.shape[1],):
        raise errors.ShapeError(f"Cannot add row {row.shape} to {a.shape}")

    def rule(g: Matrix) -> None:
        a.accumulate(g)
        row.accumulate(g.sum(axis=0))

    return _make(a.value + row.value, (a, row), rule, "add_row")


def scale(a: NodeLike, factor: float) -> Node:
    a = _as_node(a)

    def rule(g: Matrix) -> None:
        a.accumulate(g * factor)

    return _make(a.value * factor, (a,), rule, "scale")


def sum_all(a: NodeLike) -> Node:
    a = _as_node(a)

    def rule(g: Matrix) -> None:
        a.accumulate(np.full_like(a.value, g))

    return _make(np.asarray(a.value.sum(), dtype=a.value.dtype), (a,), rule, "sum_all")


def mean_rows(a: NodeLike) -> Node:
    """Average the rows of `[T×d]` into a `[1×d]` matrix."""
    a = _as_node(a)
    count = a.shape[0]

    def rule(g: Matrix) -> None:
        a.accumulate(np.broadcast_to(g / count, a.value.shape))

    return _make(a.value.mean(axis=0, keepdims=True), (a,), rule, "mean_rows")


def take_rows(a: NodeLike, rows: typing.Sequence[int]) -> Node:
    """Select rows of `a` by index."""
    a = _as_node(a)
    index = np.asarray(rows, dtype=np.intp)

    def rule(g: Matrix) -> None:
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a.accumulate(full)

    return _make(a.value[index], (a,), rule, "take_rows")


def replace_rows(a: NodeLike, rows: typing.Sequence[int], replacement: NodeLike) -> Node:
    """Copy `a` with the given rows overwritten by the rows of `replacement`."""
    a, replacement = _as_node(a), _as_node(replacement)
    index = np.asarray(rows, dtype=np.intp)
    if replacement.shape != (len(index), a.shape[1]):
        raise errors.ShapeError(
            f"Replacement {replacement.shape} does not fit {len(index)} rows of {a.shape}"
        )
    value = a.value.copy()
    value[index] = replacement.value

    def rule(g: Matrix) -> None:
        kept = g.copy()
        kept[index] = 0
        a.accumulate(kept)
        replacement.accumulate(g[index])

    return _make(value, (a, replacement), rule, "replace_rows")


def concat_rows(*parts: NodeLike) -> Node:
    """Stack matrices with equal column counts on top of each other."""
    nodes = [_as_node(p) for p in parts]
    if len({n.shape[1] for n in nodes}) != 1:
        raise errors.ShapeError(
            f"Cannot stack rows of shapes {[n.shape for n in nodes]}"
        )
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])

    def rule(g: Matrix) -> None:
        for node, start, stop in zip(nodes, bounds[:-1], bounds[1:]):
            node.accumulate(g[start:stop])

    return _make(np.concatenate([n.value for n in nodes], axis=0), nodes, rule, "concat")


def reshape(a: NodeLike, shape: typing.Tuple[int, ...]) -> Node:
    a = _as_node(a)

    def rule(g: Matrix) -> None:
        a.accumulate(g.reshape(a.value.shape))

    return _make(a.value.reshape(shape), (a,), rule, "reshape")


def _softmax(values: Matrix) -> Matrix:
    shifted = values - values.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def softmax_rows(a: NodeLike) -> Node:
    """Row-wise softmax with max subtraction."""
    a = _as_node(a)
    _check_finite(a.value, "softmax_rows input")
    out = _softmax(a.value)

    def rule(g: Matrix) -> None:
        a.accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (a,), rule, "softmax_rows")


def layer_norm(a: NodeLike, gain: NodeLike, bias: NodeLike, eps: float = 1e-5) -> Node:
    """
    Normalize each row to zero mean and unit variance, then apply `gain` and `bias`.

    The variance is the population variance of the row.
    """
    a, gain, bias = _as_node(a), _as_node(gain), _as_node(bias)
    if a.value.ndim != 2 or gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise errors.ShapeError(
            f"layer_norm of {a.shape} needs gain/bias of shape ({a.shape[1]},)"
        )
    centered = a.value - a.value.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + eps)
    normed = centered * inv_std

    def rule(g: Matrix) -> None:
        gain.accumulate((g * normed).sum(axis=0))
        bias.accumulate(g.sum(axis=0))
        d_normed = g * gain.value
        a.accumulate(
            inv_std
            * (
                d_normed
                - d_normed.mean(axis=1, keepdims=True)
                - normed * (d_normed * normed).mean(axis=1, keepdims=True)
            )
        )

    return _make(normed * gain.value + bias.value, (a, gain, bias), rule, "layer_norm")


def gelu_reference(x: Matrix) -> Matrix:
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def activation(a: NodeLike, kind: str) -> Node:
    """Apply `relu` or `gelu` elementwise."""
    a = _as_node(a)
    x = a.value
    if kind == "relu":
        out = np.maximum(x, 0)

        def rule(g: Matrix) -> None:
            a.accumulate(g * (x > 0))

    elif kind == "gelu":
        inner = _GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def rule(g: Matrix) -> None:
            slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (
                1.0 + 3 * 0.044715 * x**2
            )
            a.accumulate(g * slope)

    else:
        raise errors.ConfigError(
            f"Unknown activation {kind!r}; expected one of {', '.join(ACTIVATIONS)}"
        )
    return _make(out.astype(x.dtype, copy=False), (a,), rule, kind)


def multi_head_attention(
    q: NodeLike, k: NodeLike, v: NodeLike, heads: int
) -> typing.Tuple[Node, Matrix]:
    """
    Scaled dot-product attention over `heads` equal slices of the width.

    :returns:
        The `[T×d]` attended values and the `[heads×T×T]` weights.
    """
    q, k, v = _as_node(q), _as_node(k), _as_node(v)
    if not (q.shape == k.shape == v.shape) or q.value.ndim != 2:
        raise errors.ShapeError(f"Attention needs equal shapes, got {q.shape}, {k.shape}, {v.shape}")
    tokens, width = q.shape
    if width % heads:
        raise errors.ShapeError(f"Width {width} is not divisible by {heads} heads")
    head_dim = width // heads
    factor = float(1.0 / np.sqrt(head_dim))

    def split(x: Matrix) -> Matrix:
        return x.reshape(tokens, heads, head_dim).transpose(1, 0, 2)

    def merge(x: Matrix) -> Matrix:
        return x.transpose(1, 0, 2).reshape(tokens, width)

    qh, kh, vh = split(q.value), split(k.value), split(v.value)
    weights = _softmax(product(qh, kh.transpose(0, 2, 1)) * factor)
    out = product(weights, vh)

    def rule(g: Matrix) -> None:
        gh = split(g)
        d_weights = product(gh, vh.transpose(0, 2, 1))
        d_scores = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True))
        q.accumulate(merge(product(d_scores, kh)) * factor)
        k.accumulate(merge(product(d_scores.transpose(0, 2, 1), qh)) * factor)
        v.accumulate(merge(product(weights.transpose(0, 2, 1), gh)))

    node = _make(merge(out), (q, k, v), rule, "attention")
    return node, weights


def attention(q: NodeLike, k: NodeLike, v: NodeLike) -> typing.Tuple[Node, Matrix]:
    """Single-head attention; returns the output and the `[T×T]` weights."""
    out, weights = multi_head_attention(q, k, v, heads=1)
    return out, weights[0]


def mse(pred: NodeLike, target: NodeLike) -> Node:
    """Mean squared error over all entries."""
    pred, target = _as_node(pred), _as_node(target)
    if pred.shape != target.shape:
        raise errors.ShapeError(f"Prediction {pred.shape} does not match target {target.shape}")
    diff = pred.value - target.value
    count = diff.size

    def rule(g: Matrix) -> None:
        pred.accumulate(g * 2.0 * diff / count)
        target.accumulate(-g * 2.0 * diff / count)

    return _make(np.asarray((diff**2).mean(), dtype=diff.dtype), (pred, target), rule, "mse")


def softmax_cross_entropy(logits: NodeLike, labels: typing.Sequence[int]) -> Node:
    """Mean softmax cross-entropy of `[n×C]` logits against `n` integer labels."""
    logits = _as_node(logits)
    values = logits.value if logits.value.ndim == 2 else logits.value[None, :]
    index = np.asarray(labels, dtype=np.intp).reshape(-1)
    if values.shape[0] != len(index):
        raise errors.ShapeError(f"{len(index)} labels for logits of shape {logits.shape}")
    classes = values.shape[1]
    if np.any(index < 0) or np.any(index >= classes):
        raise errors.ShapeError(f"Labels {index.tolist()} fall outside [0, {classes})")
    shifted = values - values.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(len(index))
    loss = -log_probs[rows, index].mean()

    def rule(g: Matrix) -> None:
        grad = np.exp(log_probs)
        grad[rows, index] -= 1.0
        logits.accumulate((g * grad / len(index)).reshape(logits.value.shape))

    return _make(np.asarray(loss, dtype=values.dtype), (logits,), rule, "cross_entropy")


def linear_init(
    in_dim: int, out_dim: int, seed: typing.Union[int, np.random.Generator], dtype: typing.Optional[type] = None
) -> Matrix:
    """
    Xavier-uniform weights of shape `[in_dim×out_dim]`.

    Values are drawn from U(-a, a) with a = sqrt(6 / (in_dim + out_dim)).
    """
    if in_dim < 1 or out_dim < 1:
        raise errors.ConfigError(f"Linear dims must be >= 1, got {in_dim}x{out_dim}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    weights = rng.uniform(-bound, bound, size=(in_dim, out_dim))
    return weights.astype(dtype or default_dtype())


def gradient_errors(
    fn: typing.Callable[[typing.Dict[str, Node]], Node],
    inputs: typing.Mapping[str, Matrix],
    h: float = 1e-5,
) -> typing.Dict[str, float]:
    """
    Compare reverse-mode gradients of `fn` with central finite differences.

    :param fn:
        Builds a scalar loss from a mapping of named input nodes.
    :param inputs:
        Named 64-bit arrays at which to differentiate.
    :param h:
        Finite-difference step, within [1e-6, 1e-4].
    :returns:
        The worst relative error per input, with denominator
        max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-6 <= h <= 1e-4:
        raise errors.PreconditionError(f"Step h={h} is outside [1e-6, 1e-4]")
    for name, value in inputs.items():
        if np.asarray(value).dtype != np.float64:
            raise errors.PreconditionError(f"Gradient checks need 64-bit inputs; {name} is not")

    leaves = {name: leaf(np.array(value, dtype=np.float64)) for name, value in inputs.items()}
    loss = fn(leaves)
    _check_loss(loss)
    backward(loss)

    def evaluate(name: str, value: Matrix) -> float:
        nodes = {n: constant(np.array(v, dtype=np.float64)) for n, v in inputs.items()}
        nodes[name] = constant(value)
        out = fn(nodes)
        _check_loss(out)
        return float(out.value)

    result = {}
    for name, value in inputs.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(leaves[name].value)
        point = np.array(value, dtype=np.float64)
        worst = 0.0
        for index in np.ndindex(point.shape):
            original = point[index]
            point[index] = original + h
            upper = evaluate(name, point)
            point[index] = original - h
            lower = evaluate(name, point)
            point[index] = original
            numeric = (upper - lower) / (2 * h)
            exact = float(analytic[index])
            denominator = max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, abs(exact - numeric) / denominator)
        result[name] = worst
    return result


def grad_check(
    fn: typing.Callable[[typing.Dict[str, Node]], Node],
    inputs: typing.Mapping[str, Matrix],
    h: float = 1e-5,
) -> float:
    """Get the worst relative gradient error of `fn` over all inputs."""
    errors_by_input = gradient_errors(fn, inputs, h)
    return max(errors_by_input.values(), default=0.0)


def _check_loss(loss: Node) -> None:
    if loss.value.size != 1:
        raise errors.ShapeError(f"Gradient checks need a scalar loss, got {loss.shape}")
    _check_finite(loss.value, "loss")
