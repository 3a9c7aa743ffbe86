"""
Over-smoothing metrics over activation traces and the empirical checks built on them.

All metrics work on the token-centered representation: the mean token of
the selected positions is subtracted per feature before anything else is
measured. Computation is always in 64-bit regardless of the trace dtype.
"""
import csv
import dataclasses
import enum
import json
import logging
import pathlib
import typing

import numpy as np

from bamboo import _model
from bamboo import _tensor
from bamboo import _train
from bamboo import errors
from bamboo._model import ActivationTrace
from bamboo._model import ModelConfig
from bamboo._model import Objective
from bamboo._model import Parameters

if typing.TYPE_CHECKING:
    from bamboo._data import Dataset


logger = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-12
REPORT_CSV_FIELDS = ["layer", "ms", "centered_cos", "var", "delta_var", "degenerate"]
MEAN_DENOMINATORS = ("T", "T-1")


class PositionsMode(enum.Enum):
    ALL = "all"
    MASKED = "masked"
    NON_SPECIAL = "non-special"


class Verdict(enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    INCONCLUSIVE = "inconclusive"
    PRECONDITION_UNMET = "precondition-unmet"

    @property
    def exit_code(self) -> int:
        return {
            Verdict.PASS: 0,
            Verdict.FAIL: 1,
            Verdict.INCONCLUSIVE: 2,
            Verdict.PRECONDITION_UNMET: 3,
        }[self]


def select_positions(trace: ActivationTrace, mode: PositionsMode = PositionsMode.NON_SPECIAL) -> typing.List[int]:
    """Resolve a positions mode to indices into the trace's sequence."""
    total = trace.hidden[0].shape[0]
    if mode is PositionsMode.ALL:
        return list(range(total))
    if mode is PositionsMode.MASKED:
        return list(trace.masked)
    return [i for i in range(total) if i not in trace.special]


def _selected(trace: ActivationTrace, layer: int, positions: typing.Union[PositionsMode, typing.Sequence[int]]) -> np.ndarray:
    if isinstance(positions, PositionsMode):
        positions = select_positions(trace, positions)
    return np.asarray(trace.hidden[layer], dtype=np.float64)[list(positions)]


def _token_mean(h: np.ndarray, mean_denominator: str) -> np.ndarray:
    if mean_denominator not in MEAN_DENOMINATORS:
        raise errors.ConfigError(
            f"mean_denominator must be one of {', '.join(MEAN_DENOMINATORS)}, got {mean_denominator!r}"
        )
    count = len(h) if mean_denominator == "T" else len(h) - 1
    return h.sum(axis=0) / count


def token_std(h: np.ndarray, mean_denominator: str = "T") -> float:
    """Per-feature sample standard deviation across tokens, averaged over features."""
    h = np.asarray(h, dtype=np.float64)
    if len(h) < 2:
        raise errors.PreconditionError("ms undefined for T<2")
    centered = h - _token_mean(h, mean_denominator)
    return float(np.sqrt((centered**2).sum(axis=0) / (len(h) - 1)).mean())


def pair_cosine(
    h: np.ndarray, eps: float = DEGENERATE_EPS, mean_denominator: str = "T"
) -> typing.Tuple[float, bool]:
    """
    Mean cosine similarity over all unordered pairs of centered tokens.

    A pair whose centered norms are both below `eps` counts as similarity 1
    and marks the result degenerate; a pair with exactly one such norm
    counts as 0.
    """
    h = np.asarray(h, dtype=np.float64)
    count = len(h)
    if count < 2:
        raise errors.PreconditionError("centered pair cosine undefined for T<2")
    if count == 2 and mean_denominator == "T":
        # The two centered tokens are exact opposites.
        if np.linalg.norm(h[0] - h[1]) / 2 < eps:
            return 1.0, True
        return -1.0, False
    centered = h - _token_mean(h, mean_denominator)
    gram = _tensor.product(centered, centered.T)
    norms = np.sqrt(np.clip(np.diag(gram), 0.0, None))
    small = norms < eps
    upper = np.triu_indices(count, k=1)
    both = small[upper[0]] & small[upper[1]]
    one = small[upper[0]] ^ small[upper[1]]
    with np.errstate(divide="ignore", invalid="ignore"):
        cosines = gram[upper] / (norms[upper[0]] * norms[upper[1]])
    cosines = np.where(both, 1.0, np.where(one, 0.0, np.clip(cosines, -1.0, 1.0)))
    return float(cosines.mean()), bool(both.any())


def token_variance(h: np.ndarray, mean_denominator: str = "T") -> float:
    """Population variance of the token-centered entries."""
    h = np.asarray(h, dtype=np.float64)
    if len(h) < 2:
        return 0.0
    return float(((h - _token_mean(h, mean_denominator)) ** 2).mean())


def mean_token_std(
    trace: ActivationTrace,
    layer: int,
    positions: typing.Union[PositionsMode, typing.Sequence[int]] = PositionsMode.NON_SPECIAL,
    mean_denominator: str = "T",
) -> float:
    """Mean standard deviation of the token representations at one layer."""
    return token_std(_selected(trace, layer, positions), mean_denominator)


def centered_pair_cosine(
    trace: ActivationTrace,
    layer: int,
    positions: typing.Union[PositionsMode, typing.Sequence[int]] = PositionsMode.NON_SPECIAL,
    eps: float = DEGENERATE_EPS,
    mean_denominator: str = "T",
) -> typing.Tuple[float, bool]:
    """Mean pair cosine of the zero-centered token representations at one layer."""
    return pair_cosine(_selected(trace, layer, positions), eps, mean_denominator)


def variance_trace(
    trace: ActivationTrace,
    positions: typing.Union[PositionsMode, typing.Sequence[int]] = PositionsMode.NON_SPECIAL,
    mean_denominator: str = "T",
) -> typing.List[float]:
    """Token-centered variance of every layer from h^0 to h^L."""
    return [
        token_variance(_selected(trace, layer, positions), mean_denominator)
        for layer in range(len(trace.hidden))
    ]


def attention_energy(trace: ActivationTrace) -> typing.List[float]:
    """Largest row sum of squared attention weights per layer; at most 1 for softmax rows."""
    return [float((weights**2).sum(axis=-1).max()) for weights in trace.attention]


@dataclasses.dataclass(frozen=True)
class DiagnosticReport:
    """Per-layer over-smoothing metrics of one trace or an average of traces."""

    ms: typing.Tuple[float, ...]
    centered_cos: typing.Tuple[float, ...]
    var: typing.Tuple[float, ...]
    delta_var: typing.Tuple[float, ...]
    degenerate_layers: typing.FrozenSet[int] = frozenset()
    metadata: typing.Dict[str, typing.Any] = dataclasses.field(default_factory=dict, compare=False)
    # Variance of the masked reconstruction targets, for reports of masked models.
    sigma_sq_targets: typing.Optional[float] = None

    def __post_init__(self):
        if len(self.delta_var) != len(self.var) - 1:
            raise errors.ShapeError("delta_var needs one entry per block")

    @property
    def depth(self) -> int:
        return len(self.delta_var)

    @property
    def mean_delta_var(self) -> float:
        return float(np.mean(self.delta_var))

    @property
    def ms_slope(self) -> float:
        """Least-squares slope of ms against the layer index."""
        return float(np.polyfit(np.arange(len(self.ms)), self.ms, 1)[0])

    def with_metadata(self, **metadata: typing.Any) -> "DiagnosticReport":
        return dataclasses.replace(self, metadata={**self.metadata, **metadata})

    def rows(self) -> typing.List[typing.Dict[str, typing.Any]]:
        return [
            {
                "layer": layer,
                "ms": repr(self.ms[layer]),
                "centered_cos": repr(self.centered_cos[layer]),
                "var": repr(self.var[layer]),
                "delta_var": repr(self.delta_var[layer]) if layer < self.depth else "",
                "degenerate": int(layer in self.degenerate_layers),
            }
            for layer in range(len(self.ms))
        ]

    def to_csv(
        self, path: typing.Union[str, pathlib.Path], layers: typing.Optional[typing.Iterable[int]] = None
    ) -> None:
        """Write one row per layer, preceded by a `#` line holding the metadata as JSON."""
        rows = self.rows()
        if layers is not None:
            keep = set(layers)
            rows = [row for row in rows if row["layer"] in keep]
        metadata = self.metadata
        if self.sigma_sq_targets is not None:
            metadata = {**metadata, "sigma_sq_targets": self.sigma_sq_targets}
        with open(path, "w", newline="") as stream:
            stream.write("# " + json.dumps(metadata, sort_keys=True, default=str) + "\n")
            writer = csv.DictWriter(stream, fieldnames=REPORT_CSV_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)


def diagnose(
    trace: ActivationTrace,
    positions: PositionsMode = PositionsMode.NON_SPECIAL,
    mean_denominator: str = "T",
    eps: float = DEGENERATE_EPS,
    metadata: typing.Optional[typing.Dict[str, typing.Any]] = None,
) -> DiagnosticReport:
    """Compute every per-layer metric of a trace."""
    indices = select_positions(trace, positions)
    ms, cos, degenerate = [], [], set()
    for layer in range(len(trace.hidden)):
        h = _selected(trace, layer, indices)
        ms.append(token_std(h, mean_denominator))
        value, flagged = pair_cosine(h, eps, mean_denominator)
        cos.append(value)
        if flagged:
            degenerate.add(layer)
    var = variance_trace(trace, indices, mean_denominator)
    if degenerate:
        logger.warning("Centered token norms underflowed at layers %s", sorted(degenerate))
    return DiagnosticReport(
        ms=tuple(ms),
        centered_cos=tuple(cos),
        var=tuple(var),
        delta_var=tuple(b - a for a, b in zip(var, var[1:])),
        degenerate_layers=frozenset(degenerate),
        metadata={"positions": positions.value, **(metadata or {})},
    )


def average_reports(
    reports: typing.Sequence[DiagnosticReport], metadata: typing.Optional[typing.Dict[str, typing.Any]] = None
) -> DiagnosticReport:
    """Average reports of equal depth layer by layer."""
    if not reports:
        raise errors.PreconditionError("Cannot average zero reports")
    if len({len(r.ms) for r in reports}) != 1:
        raise errors.ShapeError("Cannot average reports of different depths")

    def mean(field: str) -> typing.Tuple[float, ...]:
        return tuple(float(v) for v in np.mean([getattr(r, field) for r in reports], axis=0))

    sigmas = [r.sigma_sq_targets for r in reports]
    return DiagnosticReport(
        ms=mean("ms"),
        centered_cos=mean("centered_cos"),
        var=mean("var"),
        delta_var=mean("delta_var"),
        degenerate_layers=frozenset().union(*(r.degenerate_layers for r in reports)),
        metadata={**reports[0].metadata, "samples": len(reports), **(metadata or {})},
        sigma_sq_targets=None if None in sigmas else float(np.mean(sigmas)),
    )


@dataclasses.dataclass(frozen=True)
class VerificationReport:
    """Outcome of one empirical check, with measured values and the thresholds used."""

    name: str
    verdict: Verdict
    measured: typing.Dict[str, typing.Any]
    thresholds: typing.Dict[str, typing.Any]
    message: str = ""

    @property
    def passed(self) -> bool:
        return self.verdict is Verdict.PASS

    def deflate(self) -> typing.Dict[str, typing.Any]:
        return {
            "name": self.name,
            "verdict": self.verdict.value,
            "message": self.message,
            "measured": self.measured,
            "thresholds": self.thresholds,
        }


def trace_model(
    params: Parameters,
    config: ModelConfig,
    tokens: np.ndarray,
    mask: typing.Optional["_train.MaskPlan"] = None,
) -> ActivationTrace:
    """Capture the trace of one sequence through the encoder."""
    objective = Objective.MAE if mask is not None else Objective.CLASSIFIER
    trace, _ = _model.forward(params, config, tokens, mask=mask, capture=True, objective=objective)
    return trace


def _lemma2_variances(config: ModelConfig, seed: int) -> typing.List[float]:
    params = _model.build(config, seed, dtype=np.float64)
    tokens = _tensor.rng_for(seed, "variance-input").standard_normal((config.seq_len, config.patch_dim))
    return variance_trace(trace_model(params, config, tokens))


def verify_lemma2(
    config: ModelConfig,
    seeds: typing.Sequence[int],
    min_pass_fraction: float = 0.95,
    slack: float = 1e-9,
) -> VerificationReport:
    """
    Check that layer variance shrinks block by block in a residual-free encoder.

    For every seed a freshly initialized model runs on Gaussian input; the
    seed passes when Var(h^{l+1}) < Var(h^l) + slack for every block.
    """
    if config.residual_enabled:
        raise errors.PreconditionError(
            "The shrinking-variance check applies to encoders without residual connections;"
            " set residual_enabled = false"
        )
    if not seeds:
        raise errors.PreconditionError("Need at least one seed")
    curves = {seed: _lemma2_variances(config, seed) for seed in seeds}
    passed = [
        seed for seed, var in curves.items() if all(b < a + slack for a, b in zip(var, var[1:]))
    ]
    fraction = len(passed) / len(seeds)
    return VerificationReport(
        name="lemma2",
        verdict=Verdict.PASS if fraction >= min_pass_fraction else Verdict.FAIL,
        measured={
            "pass_fraction": fraction,
            "passed_seeds": passed,
            "variances": {str(s): v for s, v in curves.items()},
        },
        thresholds={"min_pass_fraction": min_pass_fraction, "slack": slack},
        message=f"{len(passed)}/{len(seeds)} seeds show strictly shrinking variance",
    )


def verify_residual_growth(
    config: ModelConfig,
    seeds: typing.Sequence[int],
    min_pass_fraction: float = 0.95,
    slack: float = 1e-9,
) -> VerificationReport:
    """Check that residual blocks keep layer variance from shrinking at initialization."""
    if not config.residual_enabled:
        raise errors.PreconditionError("The growth check needs residual_enabled = true")
    if not seeds:
        raise errors.PreconditionError("Need at least one seed")
    curves = {seed: _lemma2_variances(config, seed) for seed in seeds}
    passed = [
        seed for seed, var in curves.items() if all(b >= a - slack for a, b in zip(var, var[1:]))
    ]
    fraction = len(passed) / len(seeds)
    return VerificationReport(
        name="residual_growth",
        verdict=Verdict.PASS if fraction >= min_pass_fraction else Verdict.FAIL,
        measured={
            "pass_fraction": fraction,
            "passed_seeds": passed,
            "variances": {str(s): v for s, v in curves.items()},
        },
        thresholds={"min_pass_fraction": min_pass_fraction, "slack": slack},
        message=f"{len(passed)}/{len(seeds)} seeds show non-decreasing variance",
    )


def check_lemma1(
    predictions: np.ndarray,
    targets: np.ndarray,
    tol: float = 0.3,
    convergence: float = 0.3,
) -> VerificationReport:
    """
    Compare the spread of reconstructions with the spread of their targets.

    Rows of `predictions` and `targets` are pooled masked patches. The check
    only asserts once the reconstruction loss is below `convergence` times
    the target variance.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or len(targets) == 0:
        raise errors.ShapeError(
            f"Predictions {predictions.shape} and targets {targets.shape} must match and be non-empty"
        )
    sigma_sq = token_variance(targets)
    var_pred = token_variance(predictions)
    loss = float(((predictions - targets) ** 2).mean())
    measured = {"sigma_sq": sigma_sq, "var_pred": var_pred, "loss": loss}
    thresholds = {"tol": tol, "convergence": convergence}
    if not loss < convergence * sigma_sq:
        return VerificationReport(
            name="lemma1",
            verdict=Verdict.PRECONDITION_UNMET,
            measured=measured,
            thresholds=thresholds,
            message=f"not converged: loss {loss:.4g} >= {convergence} * sigma^2 ({sigma_sq:.4g})",
        )
    passed = var_pred >= (1 - tol) * sigma_sq
    return VerificationReport(
        name="lemma1",
        verdict=Verdict.PASS if passed else Verdict.FAIL,
        measured=measured,
        thresholds=thresholds,
        message=f"Var(pred) {var_pred:.4g} vs (1 - {tol}) * sigma^2 = {(1 - tol) * sigma_sq:.4g}",
    )


def masked_reconstructions(
    params: Parameters,
    config: ModelConfig,
    train_config: "_train.TrainConfig",
    dataset: "Dataset",
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Pool the reconstructions and (normalized) targets at masked positions."""
    if config.vocab_bits:
        raise errors.PreconditionError("Reconstruction spread is defined for patch regression only")
    offset = len(config.special_positions)
    predictions, targets = [], []
    for index, tokens in enumerate(dataset.tokens):
        mask = _train.mask_for(config, train_config, 0, index)
        _, output = _model.forward(params, config, tokens, mask=mask, objective=Objective.MAE)
        rows = np.asarray(tokens, dtype=np.float64)[[p - offset for p in mask.positions]]
        predictions.append(np.asarray(output, dtype=np.float64))
        targets.append(_train.normalize_targets(rows) if train_config.per_patch_norm else rows)
    return np.concatenate(predictions), np.concatenate(targets)


def verify_lemma1(
    params: Parameters,
    config: ModelConfig,
    train_config: "_train.TrainConfig",
    dataset: "Dataset",
    tol: float = 0.3,
    convergence: float = 0.3,
) -> VerificationReport:
    """Check that a trained masked model's reconstructions keep the target variance."""
    predictions, targets = masked_reconstructions(params, config, train_config, dataset)
    return check_lemma1(predictions, targets, tol, convergence)


def model_report(
    params: Parameters,
    config: ModelConfig,
    dataset: "Dataset",
    positions: PositionsMode = PositionsMode.NON_SPECIAL,
    mean_denominator: str = "T",
    metadata: typing.Optional[typing.Dict[str, typing.Any]] = None,
    mae_config: typing.Optional["_train.TrainConfig"] = None,
) -> DiagnosticReport:
    """
    Average the diagnostics of a model over every sequence of a dataset.

    With `mae_config` the report also carries the variance of the targets
    its masks select, so masked models can be read against it.
    """
    reports = [
        diagnose(trace_model(params, config, tokens), positions, mean_denominator)
        for tokens in dataset.tokens
    ]
    report = average_reports(reports, metadata)
    if mae_config is not None and not config.vocab_bits:
        _, targets = masked_reconstructions(params, config, mae_config, dataset)
        report = dataclasses.replace(report, sigma_sq_targets=token_variance(targets))
    return report


def compare_residual_delta(
    mae: typing.Tuple[Parameters, ModelConfig],
    classifier: typing.Tuple[Parameters, ModelConfig],
    dataset: "Dataset",
    positions: PositionsMode = PositionsMode.NON_SPECIAL,
) -> VerificationReport:
    """
    Compare how fast residual blocks grow layer variance in two trained models.

    Passes when the mean per-block variance increase of the masked model
    exceeds that of the classifier; an exact tie is inconclusive.
    """
    (mae_params, mae_config), (cls_params, cls_config) = mae, classifier
    if mae_config != cls_config:
        raise errors.ConfigMismatchError("Both models must share one ModelConfig")
    if not mae_config.residual_enabled:
        raise errors.PreconditionError("The variance-growth comparison needs residual connections")
    mae_report = model_report(mae_params, mae_config, dataset, positions)
    cls_report = model_report(cls_params, cls_config, dataset, positions)
    delta_mae, delta_cls = mae_report.mean_delta_var, cls_report.mean_delta_var
    if delta_mae > delta_cls:
        verdict = Verdict.PASS
    elif delta_mae == delta_cls:
        verdict = Verdict.INCONCLUSIVE
    else:
        verdict = Verdict.FAIL
    return VerificationReport(
        name="theorem1",
        verdict=verdict,
        measured={
            "mean_delta_var_mae": delta_mae,
            "mean_delta_var_classifier": delta_cls,
            "delta_var_mae": list(mae_report.delta_var),
            "delta_var_classifier": list(cls_report.delta_var),
            "final_cos_mae": mae_report.centered_cos[-1],
            "final_cos_classifier": cls_report.centered_cos[-1],
            "ms_slope_mae": mae_report.ms_slope,
            "ms_slope_classifier": cls_report.ms_slope,
        },
        thresholds={},
        message="tie" if verdict is Verdict.INCONCLUSIVE else "",
    )
