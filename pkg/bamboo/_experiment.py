"""
Experiment files and the runners that turn them into report bundles.

An experiment file is a YAML (or JSON) document whose sections mirror the
config dataclasses. Every output lands in the experiment's output directory
and every file is a pure function of the file's contents.
"""
import csv
import dataclasses
import enum
import json
import logging
import multiprocessing
import pathlib
import typing

from bamboo import _config
from bamboo import _data
from bamboo import _diagnostics
from bamboo import _planner
from bamboo import _train
from bamboo import errors
from bamboo._data import Dataset
from bamboo._data import SyntheticSpec
from bamboo._diagnostics import DiagnosticReport
from bamboo._diagnostics import PositionsMode
from bamboo._diagnostics import VerificationReport
from bamboo._diagnostics import Verdict
from bamboo._model import ModelConfig
from bamboo._model import Objective
from bamboo._model import Parameters
from bamboo._train import TrainConfig


logger = logging.getLogger(__name__)

SWEEP_CSV_FIELDS = [
    "seed",
    "depth",
    "width",
    "heads",
    "cost_ratio",
    "scratch_accuracy",
    "finetuned_accuracy",
]


class ExperimentKind(enum.Enum):
    SINGLE = "single"
    OBJECTIVE_PAIR = "objective_pair"
    DEPTH_SWEEP = "depth_sweep"


@dataclasses.dataclass(kw_only=True, frozen=True)
class DiagnosticsSpec(_config.ConfigModel):
    positions: PositionsMode = PositionsMode.NON_SPECIAL
    # Layers written to the per-seed CSVs; all of them when unset.
    layers: typing.Optional[typing.List[int]] = None
    mean_denominator: str = "T"
    # Held-out sequences traced per model.
    samples: int = 32

    def __post_init__(self):
        if self.mean_denominator not in _diagnostics.MEAN_DENOMINATORS:
            raise errors.ConfigError(
                f"mean_denominator must be one of {', '.join(_diagnostics.MEAN_DENOMINATORS)}"
            )
        if self.samples < 1:
            raise errors.ConfigError("diagnostics.samples must be >= 1")


@dataclasses.dataclass(kw_only=True, frozen=True)
class OutputSpec(_config.ConfigModel):
    directory: str
    svg: bool = False


def _check_data_fits(model: ModelConfig, data: SyntheticSpec) -> None:
    if (model.seq_len, model.patch_dim) != (data.seq_len, data.patch_dim):
        raise errors.ConfigError(
            f"model expects [{model.seq_len}x{model.patch_dim}] tokens but data produces"
            f" [{data.seq_len}x{data.patch_dim}]"
        )
    if model.num_classes != data.num_classes:
        raise errors.ConfigError(
            f"model has {model.num_classes} classes but data has {data.num_classes}"
        )


@dataclasses.dataclass(kw_only=True, frozen=True)
class ExperimentSpec(_config.ConfigModel):
    """A training experiment: what to train, on what, and where to write the reports."""

    name: str
    kind: ExperimentKind = ExperimentKind.SINGLE
    model: ModelConfig
    train: TrainConfig
    pretrain: typing.Optional[TrainConfig] = None
    data: SyntheticSpec
    # Sequences generated; the last fifth is held out.
    samples: int = 256
    diagnostics: DiagnosticsSpec = dataclasses.field(default_factory=DiagnosticsSpec)
    outputs: OutputSpec
    repeat_seeds: typing.List[int] = dataclasses.field(default_factory=lambda: [0])
    depths: typing.Optional[typing.List[int]] = None
    sweep_multiple: int = 16
    sweep_head_dim: int = 16
    sweep_band: typing.Tuple[float, ...] = _planner.DEFAULT_BAND
    # Trace the fine-tuned rather than the pretrained MAE model in objective pairs.
    finetune_mae: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.repeat_seeds:
            raise errors.ConfigError("repeat_seeds must not be empty")
        if len(set(self.repeat_seeds)) != len(self.repeat_seeds):
            raise errors.ConfigError(f"repeat_seeds has duplicates: {self.repeat_seeds}")
        if self.samples < 5:
            raise errors.ConfigError("samples must be >= 5 so both splits are non-empty")
        if self.workers < 1:
            raise errors.ConfigError("workers must be >= 1")
        if len(self.sweep_band) != 2:
            raise errors.ConfigError(f"sweep_band needs two values, got {self.sweep_band}")
        _check_data_fits(self.model, self.data)
        if self.kind is ExperimentKind.DEPTH_SWEEP:
            if not self.depths:
                raise errors.ConfigError("A depth_sweep experiment needs a list of depths")
            if self.pretrain is None:
                raise errors.ConfigError("A depth_sweep experiment needs a pretrain section")
        if self.kind is not ExperimentKind.SINGLE and self.train.objective is not Objective.CLASSIFIER:
            raise errors.ConfigError(f"The train section of a {self.kind.value} experiment must be a classifier")
        if self.pretrain is not None and self.pretrain.objective is not Objective.MAE:
            raise errors.ConfigError("The pretrain section must use the mae objective")
        if self.finetune_mae and self.pretrain is None:
            raise errors.ConfigError("finetune_mae needs a pretrain section")


@dataclasses.dataclass(kw_only=True, frozen=True)
class VerifySpec(_config.ConfigModel):
    """Fixture of an empirical check: configs, seeds and the thresholds to judge by."""

    name: str
    model: ModelConfig
    data: typing.Optional[SyntheticSpec] = None
    samples: int = 256
    seeds: typing.List[int]
    min_pass_fraction: float = 0.95
    slack: float = 1e-9
    # Also require non-decreasing variance once residuals are switched on.
    residual_growth: bool = True
    mae: typing.Optional[TrainConfig] = None
    classifier: typing.Optional[TrainConfig] = None
    mae_finetune: typing.Optional[TrainConfig] = None
    tol: float = 0.3
    convergence: float = 0.3
    min_wins: int = 2
    trace_samples: int = 32
    outputs: OutputSpec

    def __post_init__(self):
        if not self.seeds:
            raise errors.ConfigError("seeds must not be empty")
        if not 0 < self.min_pass_fraction <= 1:
            raise errors.ConfigError("min_pass_fraction must lie in (0, 1]")
        if not 0 <= self.tol < 1 or self.convergence <= 0:
            raise errors.ConfigError("tol must lie in [0, 1) and convergence must be > 0")
        if self.data is not None:
            _check_data_fits(self.model, self.data)


def load_spec(path: typing.Union[str, pathlib.Path]) -> ExperimentSpec:
    return ExperimentSpec.inflate(_config.read_document(path))


def load_verify_spec(path: typing.Union[str, pathlib.Path]) -> VerifySpec:
    return VerifySpec.inflate(_config.read_document(path))


def _write_json(document: typing.Any, path: pathlib.Path) -> None:
    path.write_text(json.dumps(document, indent=2, sort_keys=True, default=str) + "\n")
    logger.info("Wrote %s", path)


def _datasets(data: SyntheticSpec, samples: int) -> typing.Tuple[Dataset, Dataset]:
    return _data.generate(data, samples).split()


def _traced(dataset: Dataset, samples: int) -> Dataset:
    return dataset.subset(slice(0, min(samples, len(dataset))))


@dataclasses.dataclass
class JobResult:
    """Everything one seed of an experiment produced, written by the parent in seed order."""

    seed: int
    reports: typing.Dict[str, DiagnosticReport] = dataclasses.field(default_factory=dict)
    records: typing.List[_train.EpochRecord] = dataclasses.field(default_factory=list)
    sweep_rows: typing.List[typing.Dict[str, typing.Any]] = dataclasses.field(default_factory=list)
    measured: typing.Dict[str, typing.Any] = dataclasses.field(default_factory=dict)
    error: typing.Optional[str] = None


class _Job:
    """One seed of an experiment; picklable so it can run in a worker process."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec

    def __call__(self, seed: int) -> JobResult:
        logger.info("%s: starting seed %d", self.spec.name, seed)
        runner = {
            ExperimentKind.SINGLE: self._single,
            ExperimentKind.OBJECTIVE_PAIR: self._objective_pair,
            ExperimentKind.DEPTH_SWEEP: self._depth_sweep,
        }[self.spec.kind]
        result = JobResult(seed=seed)
        try:
            runner(result)
        except errors.DivergenceError as err:
            logger.error("%s: seed %d diverged: %s", self.spec.name, seed, err)
            result.error = str(err)
            return result
        logger.info("%s: finished seed %d", self.spec.name, seed)
        return result

    @property
    def directory(self) -> pathlib.Path:
        return pathlib.Path(self.spec.outputs.directory)

    def _train(
        self,
        result: JobResult,
        model: ModelConfig,
        config: TrainConfig,
        dataset: Dataset,
        params: typing.Optional[Parameters] = None,
        stage: typing.Optional[str] = None,
        tag: str = "",
    ) -> _train.TrainState:
        seed = result.seed
        try:
            if params is None:
                state, _ = _train.train(model, config.replace(seed=seed), dataset, stage=stage)
            else:
                state, _ = _train.finetune(
                    model, config.replace(seed=seed), dataset, params, model, stage=stage or "finetune"
                )
        except errors.DivergenceError as err:
            if err.state is not None:
                result.records += err.state.history
                path = self.directory / f"partial{tag}_seed{seed}.bms"
                err.state.save(path, model)
                logger.error("Saved the state reached before divergence to %s", path)
            raise
        result.records += state.history
        return state

    def _report(
        self,
        params: Parameters,
        model: ModelConfig,
        dataset: Dataset,
        seed: int,
        objective: str,
        mae_config: typing.Optional[TrainConfig] = None,
        **metadata,
    ) -> DiagnosticReport:
        diagnostics = self.spec.diagnostics
        return _diagnostics.model_report(
            params,
            model,
            _traced(dataset, diagnostics.samples),
            diagnostics.positions,
            diagnostics.mean_denominator,
            metadata={
                "experiment": self.spec.name,
                "objective": objective,
                "seed": seed,
                "config": model.deflate(),
                "spec": self.spec.deflate(),
                **metadata,
            },
            mae_config=mae_config,
        )

    def _single(self, result: JobResult) -> None:
        spec, seed = self.spec, result.seed
        train_set, test_set = _datasets(spec.data, spec.samples)
        params = None
        objective = spec.train.objective.value
        if spec.pretrain is not None:
            pretrained = self._train(result, spec.model, spec.pretrain, train_set, stage="pretrain", tag="_pretrain")
            params = pretrained.params
            objective = f"{spec.pretrain.objective.value}+{objective}"
        state = self._train(result, spec.model, spec.train, train_set, params=params)
        if spec.train.objective is Objective.CLASSIFIER:
            result.measured["test_accuracy"] = _train.accuracy(state.params, spec.model, test_set)
        mae_config = spec.train.replace(seed=seed) if spec.train.objective is Objective.MAE else None
        result.reports["model"] = self._report(state.params, spec.model, test_set, seed, objective, mae_config)

    def _objective_pair(self, result: JobResult) -> None:
        spec, seed = self.spec, result.seed
        train_set, test_set = _datasets(spec.data, spec.samples)
        mae_config = spec.pretrain or spec.train.replace(objective=Objective.MAE)
        classifier = self._train(result, spec.model, spec.train, train_set, tag="_classifier")
        mae = self._train(result, spec.model, mae_config, train_set, stage="pretrain", tag="_mae")
        mae_params, source = mae.params, "pretrained"
        if spec.finetune_mae:
            tuned = self._train(
                result, spec.model, spec.train, train_set, params=mae.params, stage="finetune", tag="_finetune"
            )
            mae_params, source = tuned.params, "finetuned"
        result.reports.update(
            classifier=self._report(classifier.params, spec.model, test_set, seed, "classifier"),
            mae=self._report(
                mae_params, spec.model, test_set, seed, "mae", mae_config.replace(seed=seed), mae_trace_source=source
            ),
        )
        result.measured.update(
            {
                label: {
                    "mean_delta_var": report.mean_delta_var,
                    "final_centered_cos": report.centered_cos[-1],
                    "ms_slope": report.ms_slope,
                }
                for label, report in result.reports.items()
            }
        )

    def _depth_sweep(self, result: JobResult) -> None:
        spec, seed = self.spec, result.seed
        train_set, test_set = _datasets(spec.data, spec.samples)
        reference = (spec.model.depth, spec.model.width)
        low, high = spec.sweep_band
        for depth in spec.depths:
            plan = _planner.plan_widths(
                depth,
                reference,
                band=(low, high),
                multiple=spec.sweep_multiple,
                head_dim=spec.sweep_head_dim,
                seq_len=spec.model.seq_len,
                patch_dim=spec.model.patch_dim,
                num_classes=spec.model.num_classes,
            )[0]
            model = spec.model.replace(depth=plan.depth, width=plan.width, heads=plan.heads)
            scratch = self._train(
                result, model, spec.train, train_set, stage=f"scratch_L{depth}", tag=f"_scratch_L{depth}"
            )
            pretrained = self._train(
                result, model, spec.pretrain, train_set, stage=f"pretrain_L{depth}", tag=f"_pretrain_L{depth}"
            )
            tuned = self._train(
                result, model, spec.train, train_set, params=pretrained.params,
                stage=f"finetune_L{depth}", tag=f"_finetune_L{depth}",
            )
            result.sweep_rows.append(
                {
                    "seed": seed,
                    "depth": plan.depth,
                    "width": plan.width,
                    "heads": plan.heads,
                    "cost_ratio": plan.cost_ratio,
                    "scratch_accuracy": _train.accuracy(scratch.params, model, test_set),
                    "finetuned_accuracy": _train.accuracy(tuned.params, model, test_set),
                }
            )
        result.measured["sweep"] = result.sweep_rows


def _run_jobs(spec: ExperimentSpec) -> typing.List[JobResult]:
    job = _Job(spec)
    if spec.workers > 1 and len(spec.repeat_seeds) > 1:
        with multiprocessing.Pool(min(spec.workers, len(spec.repeat_seeds))) as pool:
            # map keeps seed order whatever order the workers finish in
            return pool.map(job, spec.repeat_seeds)
    return [job(seed) for seed in spec.repeat_seeds]


def _write_sweep_csv(rows: typing.List[typing.Dict[str, typing.Any]], path: pathlib.Path) -> None:
    with open(path, "w", newline="") as stream:
        writer = csv.DictWriter(stream, fieldnames=SWEEP_CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    logger.info("Wrote %s", path)


def sweep_pattern(rows: typing.Sequence[typing.Dict[str, typing.Any]]) -> typing.Dict[str, typing.Any]:
    """
    Judge a depth sweep per seed.

    Pretraining helps with depth when the best fine-tuned accuracy beats the
    shallowest one; scratch training is monotone when accuracy never drops
    as depth grows.
    """
    by_seed: typing.Dict[int, typing.List[typing.Dict[str, typing.Any]]] = {}
    for row in rows:
        by_seed.setdefault(row["seed"], []).append(row)
    pretrained_gains, scratch_monotone = [], []
    for seed_rows in by_seed.values():
        seed_rows = sorted(seed_rows, key=lambda r: r["depth"])
        tuned = [r["finetuned_accuracy"] for r in seed_rows]
        scratch = [r["scratch_accuracy"] for r in seed_rows]
        pretrained_gains.append(max(tuned) > tuned[0])
        scratch_monotone.append(all(b >= a for a, b in zip(scratch, scratch[1:])) and scratch[-1] > scratch[0])
    return {
        "pretrained_gains": sum(pretrained_gains),
        "scratch_monotone": sum(scratch_monotone),
        "seeds": len(by_seed),
    }


def run(spec: ExperimentSpec) -> typing.Dict[str, typing.Any]:
    """
    Run every seed of an experiment and write its report bundle.

    A seed that diverges does not stop the others. Its loss curve up to the
    divergence and the outputs of finished seeds are written before a
    `DivergenceError` naming the failed seeds is raised.

    :returns:
        The summary document also written to `summary.json`.
    """
    directory = pathlib.Path(spec.outputs.directory)
    directory.mkdir(parents=True, exist_ok=True)
    logger.info("Running %s (%s) over seeds %s", spec.name, spec.kind.value, spec.repeat_seeds)
    results = _run_jobs(spec)

    layers = spec.diagnostics.layers
    for result in results:
        _train.write_loss_csv(result.records, directory / f"losses_seed{result.seed}.csv", append=False)
        for label, report in result.reports.items():
            path = directory / f"diagnostics_{label}_seed{result.seed}.csv"
            report.to_csv(path, layers)
            logger.info("Wrote %s", path)
    failed = [r for r in results if r.error is not None]
    if failed:
        raise errors.DivergenceError(
            "; ".join(f"seed {r.seed}: {r.error}" for r in failed)
            + f" (outputs of the other seeds are in {directory})"
        )

    aggregates = {}
    for label in results[0].reports:
        aggregates[label] = _diagnostics.average_reports(
            [r.reports[label] for r in results],
            metadata={"seed": spec.repeat_seeds, "aggregate": True},
        )
        aggregates[label].to_csv(directory / f"diagnostics_{label}_aggregate.csv", layers)

    summary: typing.Dict[str, typing.Any] = {
        "spec": spec.deflate(),
        "seeds": [{"seed": r.seed, **r.measured} for r in results],
    }
    if spec.kind is ExperimentKind.DEPTH_SWEEP:
        rows = [row for r in results for row in r.sweep_rows]
        _write_sweep_csv(rows, directory / "sweep.csv")
        summary["pattern"] = sweep_pattern(rows)
    if spec.kind is ExperimentKind.OBJECTIVE_PAIR:
        summary["mae_wins"] = sum(
            r.measured["mae"]["mean_delta_var"] > r.measured["classifier"]["mean_delta_var"] for r in results
        )

    if spec.outputs.svg:
        from bamboo import _plots

        if aggregates:
            _plots.plot_diagnostics(aggregates, directory / "diagnostics.svg", title=spec.name)
        if spec.kind is ExperimentKind.DEPTH_SWEEP:
            _plots.plot_sweep(rows, directory / "sweep.svg", title=spec.name)
    _write_json(summary, directory / "summary.json")
    return summary


def combine_verdicts(verdicts: typing.Iterable[Verdict]) -> Verdict:
    """A failure outranks an unmet precondition, which outranks a tie."""
    verdicts = set(verdicts)
    for verdict in (Verdict.FAIL, Verdict.PRECONDITION_UNMET, Verdict.INCONCLUSIVE):
        if verdict in verdicts:
            return verdict
    return Verdict.PASS


def _bundle(spec: VerifySpec, report: VerificationReport, parts: typing.Sequence[VerificationReport]) -> VerificationReport:
    directory = pathlib.Path(spec.outputs.directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_json(
        {
            "spec": spec.deflate(),
            "report": report.deflate(),
            "parts": [p.deflate() for p in parts],
        },
        directory / f"verify_{report.name}.json",
    )
    return report


def verify_lemma2(spec: VerifySpec) -> VerificationReport:
    """Shrinking variance without residuals, and optionally growth with them."""
    parts = [_diagnostics.verify_lemma2(spec.model, spec.seeds, spec.min_pass_fraction, spec.slack)]
    if spec.residual_growth:
        parts.append(
            _diagnostics.verify_residual_growth(
                spec.model.replace(residual_enabled=True), spec.seeds, spec.min_pass_fraction, spec.slack
            )
        )
    report = VerificationReport(
        name="lemma2",
        verdict=combine_verdicts(p.verdict for p in parts),
        measured={p.name: p.measured["pass_fraction"] for p in parts},
        thresholds={"min_pass_fraction": spec.min_pass_fraction, "slack": spec.slack},
        message="; ".join(p.message for p in parts),
    )
    return _bundle(spec, report, parts)


def _require(spec: VerifySpec, *names: str) -> None:
    missing = [n for n in names if getattr(spec, n) is None]
    if missing:
        raise errors.ConfigError(f"{spec.name} needs the section(s) {', '.join(missing)}")


def verify_lemma1(spec: VerifySpec) -> VerificationReport:
    """Reconstruction spread of a trained masked model against the target spread."""
    _require(spec, "data", "mae")
    train_set, test_set = _datasets(spec.data, spec.samples)
    parts = []
    for seed in spec.seeds:
        config = spec.mae.replace(seed=seed)
        state, _ = _train.train(spec.model, config, train_set, stage="pretrain")
        part = _diagnostics.verify_lemma1(state.params, spec.model, config, test_set, spec.tol, spec.convergence)
        parts.append(dataclasses.replace(part, measured={**part.measured, "seed": seed}))
    report = VerificationReport(
        name="lemma1",
        verdict=combine_verdicts(p.verdict for p in parts),
        measured={"per_seed": [p.measured for p in parts]},
        thresholds={"tol": spec.tol, "convergence": spec.convergence},
        message="; ".join(p.message for p in parts),
    )
    return _bundle(spec, report, parts)


def verify_theorem1(spec: VerifySpec) -> VerificationReport:
    """
    Residual variance growth of a masked model against a classifier, per seed.

    A seed is a win when the masked model's mean ΔVar is larger. It counts
    towards the verdict only when it shows the whole pattern: larger ΔVar,
    lower final centered cosine and steeper ms slope.
    """
    _require(spec, "data", "mae", "classifier")
    train_set, test_set = _datasets(spec.data, spec.samples)
    traced = _traced(test_set, spec.trace_samples)
    parts = []
    for seed in spec.seeds:
        classifier, _ = _train.train(spec.model, spec.classifier.replace(seed=seed), train_set)
        mae, _ = _train.train(spec.model, spec.mae.replace(seed=seed), train_set, stage="pretrain")
        mae_params = mae.params
        if spec.mae_finetune is not None:
            tuned, _ = _train.finetune(
                spec.model, spec.mae_finetune.replace(seed=seed), train_set, mae.params, spec.model
            )
            mae_params = tuned.params
        part = _diagnostics.compare_residual_delta((mae_params, spec.model), (classifier.params, spec.model), traced)
        measured = part.measured
        pattern = (
            part.verdict is Verdict.PASS
            and measured["final_cos_mae"] < measured["final_cos_classifier"]
            and measured["ms_slope_mae"] > measured["ms_slope_classifier"]
        )
        parts.append(dataclasses.replace(part, measured={**measured, "seed": seed, "full_pattern": pattern}))
    verdicts = [p.verdict for p in parts]
    wins = verdicts.count(Verdict.PASS)
    full_pattern_wins = sum(p.measured["full_pattern"] for p in parts)
    if all(v is Verdict.INCONCLUSIVE for v in verdicts):
        verdict = Verdict.INCONCLUSIVE
    elif full_pattern_wins >= min(spec.min_wins, len(parts)):
        verdict = Verdict.PASS
    else:
        verdict = Verdict.FAIL
    report = VerificationReport(
        name="theorem1",
        verdict=verdict,
        measured={
            "wins": wins,
            "full_pattern_wins": full_pattern_wins,
            "ties": verdicts.count(Verdict.INCONCLUSIVE),
            "seeds": len(parts),
            "mean_delta_var_mae": [p.measured["mean_delta_var_mae"] for p in parts],
            "mean_delta_var_classifier": [p.measured["mean_delta_var_classifier"] for p in parts],
        },
        thresholds={"min_wins": spec.min_wins},
        message=(
            f"masked model grew variance faster in {wins}/{len(parts)} seeds,"
            f" with the full pattern in {full_pattern_wins}"
        ),
    )
    return _bundle(spec, report, parts)


VERIFIERS = {
    "lemma1": verify_lemma1,
    "lemma2": verify_lemma2,
    "theorem1": verify_theorem1,
}

