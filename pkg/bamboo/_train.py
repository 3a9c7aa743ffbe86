import csv
import dataclasses
import logging
import math
import pathlib
import typing

import numpy as np

from bamboo import _config
from bamboo import _model
from bamboo import _tensor
from bamboo import errors
from bamboo._model import ModelConfig
from bamboo._model import Objective
from bamboo._model import Parameters
from bamboo._tensor import Node

if typing.TYPE_CHECKING:
    from bamboo._data import Dataset


logger = logging.getLogger(__name__)

CONTINUOUS_MASK_RATIO = 0.75
DISCRETE_MASK_RATIO = 0.15
TARGET_NORM_EPS = 1e-6
LOSS_CSV_FIELDS = ["stage", "epoch", "mean_loss", "accuracy"]
STATE_MAGIC = b"BMS1"


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclasses.dataclass(frozen=True)
class MaskPlan:
    """Masked positions of one sequence, in encoder coordinates."""

    positions: typing.Tuple[int, ...]
    ratio: float

    def __post_init__(self):
        positions = tuple(int(p) for p in self.positions)
        if list(positions) != sorted(set(positions)):
            raise errors.ConfigError(f"Mask positions must be sorted and unique: {positions}")
        if not 0 < self.ratio <= 1:
            raise errors.ConfigError(f"Mask ratio must lie in (0, 1], got {self.ratio}")
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return len(self.positions)


def sample_mask(
    seq_len: int, ratio: float, rng: np.random.Generator, offset: int = 0
) -> MaskPlan:
    """
    Choose round(ratio * seq_len) positions uniformly without replacement.

    :param offset:
        Number of special tokens in front of the maskable ones; they are
        never chosen.
    """
    if not 0 < ratio <= 1:
        raise errors.ConfigError(f"Mask ratio must lie in (0, 1], got {ratio}")
    count = round_half_up(ratio * seq_len)
    if count == 0:
        raise errors.EmptyMaskError(
            f"empty mask: ratio {ratio} of {seq_len} tokens rounds to zero positions"
        )
    if count == seq_len:
        logger.warning("Mask covers all %d tokens; no visible context remains", seq_len)
    chosen = np.sort(rng.choice(seq_len, size=count, replace=False))
    return MaskPlan(positions=tuple(int(c) + offset for c in chosen), ratio=ratio)


def normalize_targets(targets: np.ndarray, eps: float = TARGET_NORM_EPS) -> np.ndarray:
    """Scale each target row to zero mean and unit variance."""
    mean = targets.mean(axis=1, keepdims=True)
    var = targets.var(axis=1, keepdims=True)
    return (targets - mean) / np.sqrt(var + eps)


def mae_loss(pred: _tensor.NodeLike, targets: np.ndarray, per_patch_norm: bool = True) -> Node:
    """
    Mean squared reconstruction error over every entry of the masked patches.

    With `per_patch_norm` each target row is normalized before comparison.
    """
    if len(targets) == 0:
        raise errors.EmptyMaskError("Cannot compute a reconstruction loss over zero patches")
    targets = normalize_targets(targets) if per_patch_norm else targets
    dtype = pred.value.dtype if isinstance(pred, Node) else np.asarray(pred).dtype
    return _tensor.mse(pred, targets.astype(dtype))


def cls_loss(logits: _tensor.NodeLike, label: int) -> Node:
    """Softmax cross-entropy of one sequence's logits."""
    return _tensor.softmax_cross_entropy(logits, [label])


def quantize_tokens(tokens: np.ndarray, bits: int) -> np.ndarray:
    """Code each token by the sign pattern of its first `bits` features."""
    signs = (tokens[:, :bits] > 0).astype(np.int64)
    return signs @ (1 << np.arange(bits, dtype=np.int64))


def token_loss(logits: _tensor.NodeLike, codes: typing.Sequence[int]) -> Node:
    """Mean cross-entropy of masked-token code predictions."""
    if len(codes) == 0:
        raise errors.EmptyMaskError("Cannot compute a token loss over zero positions")
    return _tensor.softmax_cross_entropy(logits, codes)


@dataclasses.dataclass(kw_only=True, frozen=True)
class TrainConfig(_config.ConfigModel):
    """Optimization settings for one training stage."""

    objective: Objective
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    # Defaults to 0.75 for patch regression and 0.15 for token codes.
    mask_ratio: typing.Optional[float] = None
    per_patch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise errors.ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise errors.ConfigError("learning_rate and adam_eps must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise errors.ConfigError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise errors.ConfigError("weight_decay must be >= 0")
        if (
            self.objective is Objective.MAE
            and self.mask_ratio is not None
            and not 0 < self.mask_ratio < 1
        ):
            raise errors.ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")

    def resolved_mask_ratio(self, model_config: ModelConfig) -> float:
        if self.mask_ratio is not None:
            return self.mask_ratio
        return DISCRETE_MASK_RATIO if model_config.vocab_bits else CONTINUOUS_MASK_RATIO


@dataclasses.dataclass(frozen=True)
class EpochRecord:
    stage: str
    epoch: int
    mean_loss: float
    accuracy: typing.Optional[float] = None


@dataclasses.dataclass
class TrainState:
    """Parameters plus the optimizer state that updates them."""

    params: Parameters
    first_moment: typing.Dict[str, np.ndarray]
    second_moment: typing.Dict[str, np.ndarray]
    step: int = 0
    history: typing.List[EpochRecord] = dataclasses.field(default_factory=list)

    @classmethod
    def create(cls, params: Parameters) -> "TrainState":
        return cls(
            params=params,
            first_moment={n: np.zeros_like(t) for n, t in params.items()},
            second_moment={n: np.zeros_like(t) for n, t in params.items()},
        )

    def save(self, path: typing.Union[str, pathlib.Path], config: ModelConfig) -> None:
        """
        Write the state to a single binary file that `load` can resume from.

        The layout is the magic `BMS1`, a little-endian uint32 byte length and
        a JSON header holding the config, step and history, followed by the
        parameters, first moments and second moments, each in declaration
        order as little-endian 32-bit floats.
        """
        expected = _model.parameter_shapes(config)
        for tensors in (self.params.tensors, self.first_moment, self.second_moment):
            if [(n, np.shape(t)) for n, t in tensors.items()] != expected:
                raise errors.ConfigMismatchError("Training state does not match the given config")
        header = {
            "config": config.deflate(),
            "step": self.step,
            "history": [dataclasses.asdict(r) for r in self.history],
        }
        with open(path, "wb") as stream:
            _model.write_header(stream, STATE_MAGIC, header)
            for tensors in (self.params.tensors, self.first_moment, self.second_moment):
                _model.write_tensors(stream, tensors)

    @classmethod
    def load(
        cls, path: typing.Union[str, pathlib.Path], dtype: typing.Optional[type] = None
    ) -> typing.Tuple[ModelConfig, "TrainState"]:
        """Read a file written by `save`, returning its config and state."""
        blob = pathlib.Path(path).read_bytes()
        header, offset = _model.read_header(blob, STATE_MAGIC, path)
        try:
            config = ModelConfig.inflate(header["config"])
            step = header["step"]
            history = [EpochRecord(**r) for r in header["history"]]
        except (KeyError, TypeError, errors.ConfigError) as err:
            raise errors.FormatError(f"{path} has an invalid state header: {err}") from None
        shapes = _model.parameter_shapes(config)
        blocks = []
        for _ in range(3):
            tensors, offset = _model.read_tensors(blob, offset, shapes, path, dtype)
            blocks.append(tensors)
        if offset != len(blob):
            raise errors.FormatError(f"{path} has {len(blob) - offset} trailing bytes")
        params, first, second = blocks
        state = cls(params=Parameters(params), first_moment=first, second_moment=second, step=step, history=history)
        return config, state


def adam_step(
    state: TrainState,
    gradients: typing.Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> TrainState:
    """
    Apply one bias-corrected Adam update with decoupled weight decay.

    Tensors without a gradient entry are treated as having zero gradient.
    The state is updated in place and returned.
    """
    for name, grad in gradients.items():
        if not np.all(np.isfinite(grad)):
            raise errors.NonFiniteError(
                f"Non-finite gradient for {name} at step {state.step + 1};"
                f" max |g| = {np.nanmax(np.abs(grad))}"
            )
    step = state.step + 1
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    for name, value in state.params.items():
        grad = gradients.get(name)
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= beta1
        v *= beta2
        if grad is not None:
            m += (1.0 - beta1) * grad
            v += (1.0 - beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        value -= (lr * (update + weight_decay * value)).astype(value.dtype)
    state.step = step
    if not state.params.is_finite():
        raise errors.NonFiniteError(f"Parameters became non-finite at step {step}")
    return state


def sample_loss(
    nodes: typing.Dict[str, Node],
    model_config: ModelConfig,
    train_config: TrainConfig,
    tokens: np.ndarray,
    label: int,
    mask: typing.Optional[MaskPlan] = None,
) -> typing.Tuple[Node, Node]:
    """Build the loss graph for one sequence, returning (loss, model output)."""
    if train_config.objective is Objective.CLASSIFIER:
        result = _model.forward_graph(nodes, model_config, tokens, objective=Objective.CLASSIFIER)
        return cls_loss(result.output, label), result.output
    result = _model.forward_graph(nodes, model_config, tokens, mask=mask, objective=Objective.MAE)
    offset = len(model_config.special_positions)
    rows = tokens[[p - offset for p in mask.positions]]
    if model_config.vocab_bits:
        return token_loss(result.output, quantize_tokens(rows, model_config.vocab_bits)), result.output
    return mae_loss(result.output, rows, train_config.per_patch_norm), result.output


def mask_for(
    model_config: ModelConfig, train_config: TrainConfig, epoch: int, index: int
) -> MaskPlan:
    """Draw the mask of one sample in one epoch; fresh for every pair."""
    rng = _tensor.rng_for(train_config.seed, "mask", epoch, index)
    return sample_mask(
        model_config.seq_len,
        train_config.resolved_mask_ratio(model_config),
        rng,
        offset=len(model_config.special_positions),
    )


def _check_dataset(model_config: ModelConfig, dataset: "Dataset") -> None:
    expected = (model_config.seq_len, model_config.patch_dim)
    if dataset.tokens.shape[1:] != expected:
        raise errors.ShapeError(
            f"Dataset tokens {dataset.tokens.shape[1:]} do not match the model's {expected}"
        )
    if len(dataset) and dataset.labels.max() >= model_config.num_classes:
        raise errors.ShapeError(
            f"Dataset has labels up to {dataset.labels.max()} but the model has"
            f" {model_config.num_classes} classes"
        )


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: "Dataset",
    params: typing.Optional[Parameters] = None,
    stage: typing.Optional[str] = None,
) -> typing.Tuple[TrainState, typing.List[EpochRecord]]:
    """
    Train for a fixed number of epochs.

    Gradients of a batch are summed sample by sample in a fixed order and
    averaged, so the result is a pure function of the configs, the data and
    the seed.

    :param params:
        Starting parameters; a fresh build under `train_config.seed` when omitted.
    :param stage:
        Label written to the loss curve; defaults to the objective name.
    :raises DivergenceError:
        When a loss or gradient turns non-finite. The error carries the
        state reached so far, whose history ends with the diverging epoch.
    """
    _check_dataset(model_config, dataset)
    stage = stage or train_config.objective.value
    if params is None:
        params = _model.build(model_config, train_config.seed)
    state = TrainState.create(params)
    order_rng = _tensor.rng_for(train_config.seed, "order")
    records = []
    for epoch in range(train_config.epochs):
        order = order_rng.permutation(len(dataset))
        losses, correct = [], 0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            totals: typing.Dict[str, np.ndarray] = {}
            try:
                for index in batch:
                    nodes = state.params.as_nodes()
                    mask = None
                    if train_config.objective is Objective.MAE:
                        mask = mask_for(model_config, train_config, epoch, int(index))
                    loss, output = sample_loss(
                        nodes,
                        model_config,
                        train_config,
                        dataset.tokens[index],
                        int(dataset.labels[index]),
                        mask,
                    )
                    _tensor.backward(loss)
                    losses.append(float(loss.value))
                    if train_config.objective is Objective.CLASSIFIER:
                        correct += int(np.argmax(output.value[0]) == dataset.labels[index])
                    for name, node in nodes.items():
                        if node.grad is None:
                            continue
                        if name in totals:
                            totals[name] += node.grad
                        else:
                            totals[name] = node.grad
                gradients = {n: g / len(batch) for n, g in totals.items()}
                adam_step(
                    state,
                    gradients,
                    train_config.learning_rate,
                    train_config.beta1,
                    train_config.beta2,
                    train_config.adam_eps,
                    train_config.weight_decay,
                )
            except errors.NonFiniteError as err:
                # keep the diverging epoch so the partial loss curve ends where training stopped
                state.history.append(
                    EpochRecord(
                        stage=stage,
                        epoch=epoch,
                        mean_loss=float(np.mean(losses)) if losses else float("nan"),
                    )
                )
                raise errors.DivergenceError(
                    f"Training diverged in {stage} epoch {epoch} at step {state.step}: {err}",
                    state=state,
                ) from err
            logger.debug("%s epoch %d step %d loss %.6f", stage, epoch, state.step, losses[-1])
        accuracy = None
        if train_config.objective is Objective.CLASSIFIER and len(order):
            accuracy = correct / len(order)
        record = EpochRecord(
            stage=stage,
            epoch=epoch,
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            accuracy=accuracy,
        )
        records.append(record)
        state.history.append(record)
        logger.info(
            "%s epoch %d/%d mean loss %.6f%s",
            stage,
            epoch + 1,
            train_config.epochs,
            record.mean_loss,
            f" accuracy {accuracy:.4f}" if accuracy is not None else "",
        )
    return state, records


def finetune(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: "Dataset",
    pretrained: Parameters,
    pretrained_config: ModelConfig,
    stage: str = "finetune",
) -> typing.Tuple[TrainState, typing.List[EpochRecord]]:
    """
    Train a classifier starting from a pretrained encoder.

    The encoder tensors are copied from `pretrained`; the heads are replaced
    by a fresh initialization under the fine-tuning seed.
    """
    if model_config != pretrained_config:
        raise errors.ConfigMismatchError(
            "Fine-tuning must use the pretraining ModelConfig;"
            f" got {model_config.deflate()} vs {pretrained_config.deflate()}"
        )
    if train_config.objective is not Objective.CLASSIFIER:
        raise errors.ConfigError("The fine-tuning stage must use the classifier objective")
    params = pretrained.astype(pretrained.dtype)
    fresh = _model.build(model_config, train_config.seed, dtype=params.dtype)
    for name in fresh.head_names():
        params[name] = fresh[name]
    return train(model_config, train_config, dataset, params=params, stage=stage)


def pretrain_then_finetune(
    model_config: ModelConfig,
    pretrain_config: TrainConfig,
    finetune_config: TrainConfig,
    pretrain_data: "Dataset",
    finetune_data: "Dataset",
) -> TrainState:
    """
    Masked pretraining followed by classification fine-tuning.

    :returns:
        The fine-tuned state; its history holds both stages' curves.
    """
    if pretrain_config.objective is not Objective.MAE:
        raise errors.ConfigError("The pretraining stage must use the mae objective")
    pretrained, _ = train(model_config, pretrain_config, pretrain_data, stage="pretrain")
    state, _ = finetune(
        model_config, finetune_config, finetune_data, pretrained.params, model_config
    )
    state.history = pretrained.history + state.history
    return state


def accuracy(params: Parameters, model_config: ModelConfig, dataset: "Dataset") -> float:
    """Fraction of sequences whose argmax logit matches the label."""
    if not len(dataset):
        return float("nan")
    hits = 0
    for tokens, label in zip(dataset.tokens, dataset.labels):
        _, logits = _model.forward(params, model_config, tokens, objective=Objective.CLASSIFIER)
        hits += int(np.argmax(logits) == label)
    return hits / len(dataset)


def _format(value: typing.Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_loss_csv(
    records: typing.Iterable[EpochRecord], path: typing.Union[str, pathlib.Path], append: bool = True
) -> None:
    """Write loss curves with columns stage, epoch, mean_loss, accuracy."""
    path = pathlib.Path(path)
    exists = path.exists() and path.stat().st_size > 0
    with open(path, "a" if append else "w", newline="") as stream:
        writer = csv.DictWriter(stream, fieldnames=LOSS_CSV_FIELDS, lineterminator="\n")
        if not (append and exists):
            writer.writeheader()
        for record in records:
            writer.writerow(
                {
                    "stage": record.stage,
                    "epoch": record.epoch,
                    "mean_loss": _format(record.mean_loss),
                    "accuracy": _format(record.accuracy),
                }
            )


# Softmax ignores a shift shared by every score in a row, so these biases
# always receive an exactly zero gradient.
SHIFT_INVARIANT_SUFFIX = ".attn.k.bias"


@dataclasses.dataclass(frozen=True)
class GradientCheck:
    """Finite-difference comparison of a whole model loss."""

    relative: typing.Dict[str, float]
    # Largest analytic gradient entry among the shift-invariant biases.
    shift_invariant_grad: float

    @property
    def worst(self) -> float:
        return max(self.relative.values(), default=0.0)

    def passed(self, tol: float, zero_tol: float = 1e-10) -> bool:
        return self.worst < tol and self.shift_invariant_grad <= zero_tol


def check_model_gradients(
    model_config: ModelConfig, objective: Objective, seed: int = 0, h: float = 1e-5, jitter: float = 0.1
) -> GradientCheck:
    """
    Check the gradient of one sequence's loss with respect to every parameter.

    Parameters are built in 64-bit and jittered with Gaussian noise of
    standard deviation `jitter` so zero-initialized tensors are not checked
    at a special point. Key-projection biases are compared against zero
    instead, since their finite differences are pure rounding noise.
    """
    params = _model.build(model_config, seed, dtype=np.float64)
    rng = _tensor.rng_for(seed, "gradcheck")
    for name, value in params.items():
        params[name] = value + jitter * rng.standard_normal(value.shape)
    tokens = rng.standard_normal((model_config.seq_len, model_config.patch_dim))
    label = int(rng.integers(model_config.num_classes))
    train_config = TrainConfig(objective=objective, seed=seed)
    mask = mask_for(model_config, train_config, 0, 0) if objective is Objective.MAE else None

    shift_invariant = [n for n in params if n.endswith(SHIFT_INVARIANT_SUFFIX)]
    fixed = {n: _tensor.constant(params[n]) for n in shift_invariant}
    inputs = {n: t for n, t in params.items() if n not in fixed}

    def loss_of(nodes: typing.Dict[str, Node]) -> Node:
        loss, _ = sample_loss({**nodes, **fixed}, model_config, train_config, tokens, label, mask)
        return loss

    relative = _tensor.gradient_errors(loss_of, inputs, h)

    nodes = params.as_nodes()
    loss, _ = sample_loss(nodes, model_config, train_config, tokens, label, mask)
    _tensor.backward(loss)
    shift_grad = max(
        (float(np.abs(nodes[n].grad).max()) for n in shift_invariant if nodes[n].grad is not None),
        default=0.0,
    )
    return GradientCheck(relative=relative, shift_invariant_grad=shift_grad)
