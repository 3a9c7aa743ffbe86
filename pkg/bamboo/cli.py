"""
Command line entry point.

Exit codes: 0 pass, 1 error or failed check, 2 inconclusive, 3 precondition unmet.
"""
import argparse
import logging
import os
import pathlib
import sys
import typing

from bamboo import _config
from bamboo import _data
from bamboo import _experiment
from bamboo import _planner
from bamboo import _tensor
from bamboo import _train
from bamboo import errors
from bamboo._diagnostics import Verdict
from bamboo._model import Activation
from bamboo._model import HeadMode
from bamboo._model import ModelConfig
from bamboo._model import NormPlacement
from bamboo._model import Objective


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1

_TABLE_LABELS = ("Depth", "Width", "#Attention Heads", "Computation Cost")


def _int_list(text: str) -> typing.List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _int_pair(text: str) -> typing.Tuple[int, int]:
    values = _int_list(text)
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected DEPTH,WIDTH, got {text!r}")
    return values[0], values[1]


def _band(text: str) -> typing.Tuple[float, float]:
    try:
        low, high = (float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW,HIGH, got {text!r}") from None
    return low, high


def format_table(rows: typing.Sequence[_planner.PlannedConfig]) -> str:
    """Lay out configurations as columns under the Depth/Width/Heads/Cost row labels."""
    cells = [
        [str(r.depth) for r in rows],
        [str(r.width) for r in rows],
        [str(r.heads) for r in rows],
        [_planner.format_cost(r.cost_ratio) for r in rows],
    ]
    label_width = max(len(label) for label in _TABLE_LABELS) + 2
    column_width = max((len(c) for row in cells for c in row), default=0) + 2
    lines = []
    for label, row in zip(_TABLE_LABELS, cells):
        lines.append(label.ljust(label_width) + "".join(c.ljust(column_width) for c in row).rstrip())
    return "\n".join(lines)


def cmd_plan(args: argparse.Namespace) -> int:
    reference = args.reference or args.ref
    rows = [
        _planner.planned(depth, width, reference, head_dim=args.head_dim)
        for depth, width in args.config
    ]
    for depth in args.depths:
        candidates = _planner.plan_widths(
            depth, reference, band=args.band, multiple=args.multiple, head_dim=args.head_dim
        )
        rows.extend(candidates if args.all else candidates[:1])
    print(format_table(rows))
    if args.csv:
        _planner.write_plan_csv(rows, args.csv)
        logger.info("Wrote %s", args.csv)
    return EXIT_OK


def _with_output(spec, directory: typing.Optional[str]):
    if directory is None:
        return spec
    return spec.replace(outputs=spec.outputs.replace(directory=directory))


def cmd_run(args: argparse.Namespace) -> int:
    spec = _with_output(_experiment.load_spec(args.spec), args.output_dir)
    if args.workers is not None:
        spec = spec.replace(workers=args.workers)
    _experiment.run(spec)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    spec = _with_output(_experiment.load_verify_spec(args.spec), args.output_dir)
    report = _experiment.VERIFIERS[args.which](spec)
    print(f"{report.name}: {report.verdict.value}. {report.message}")
    return report.verdict.exit_code


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = ModelConfig(
        depth=args.depth,
        width=8,
        heads=2,
        seq_len=4,
        patch_dim=3,
        num_classes=3,
        norm_placement=NormPlacement(args.norm),
        activation=Activation.GELU,
        use_cls_token=args.cls,
        head_mode=HeadMode.CLS if args.cls else HeadMode.MEAN_POOL,
    )
    objectives = list(Objective) if args.objective == "both" else [Objective(args.objective)]
    passed = True
    with _tensor.precision("f64"):
        for objective in objectives:
            check = _train.check_model_gradients(config, objective, seed=args.seed, h=args.h)
            ok = check.passed(args.tol)
            passed = passed and ok
            print(
                f"{objective.value}: worst relative error {check.worst:.3e},"
                f" key-bias gradient {check.shift_invariant_grad:.1e} ({'ok' if ok else 'FAILED'})"
            )
    return EXIT_OK if passed else EXIT_ERROR


def cmd_dump_data(args: argparse.Namespace) -> int:
    spec = _data.SyntheticSpec.inflate(_config.read_document(args.spec))
    dataset = _data.generate(spec, args.n)
    _data.dump(dataset, args.output, spec.num_classes)
    logger.info("Wrote %d sequences to %s", len(dataset), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bamboo", description="Desk-scale transformer over-smoothing lab")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log per-batch progress")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="log warnings and errors only")
    parser.add_argument(
        "--precision", choices=["f32", "f64"], help=f"float precision; overrides {_tensor.PRECISION_ENV}"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    plan = commands.add_parser("plan", help="compute-matched deeper-narrower configurations")
    plan.add_argument("--ref", choices=sorted(_planner.REFERENCE_SCALES), default="base")
    plan.add_argument("--reference", type=_int_pair, help="explicit DEPTH,WIDTH reference; wins over --ref")
    plan.add_argument("--depths", type=_int_list, default=[], help="comma-separated target depths")
    plan.add_argument(
        "--config", type=_int_pair, action="append", default=[], help="score an explicit DEPTH,WIDTH"
    )
    plan.add_argument("--band", type=_band, default=_planner.DEFAULT_BAND, help="cost band LOW,HIGH")
    plan.add_argument("--multiple", type=int, default=_planner.HEAD_DIM, help="width step")
    plan.add_argument("--head-dim", type=int, default=_planner.HEAD_DIM)
    plan.add_argument("--all", action="store_true", help="show every in-band width, not just the closest")
    plan.add_argument("--csv", type=pathlib.Path, help="also write the rows as CSV")
    plan.set_defaults(handler=cmd_plan)

    run = commands.add_parser("run", help="train and write a diagnostics bundle")
    run.add_argument("spec", type=pathlib.Path)
    run.add_argument("--output-dir", help="override outputs.directory")
    run.add_argument("--workers", type=int, help="override workers")
    run.set_defaults(handler=cmd_run)

    verify = commands.add_parser("verify", help="run an empirical check from a fixture file")
    verify.add_argument("which", choices=sorted(_experiment.VERIFIERS))
    verify.add_argument("spec", type=pathlib.Path)
    verify.add_argument("--output-dir", help="override outputs.directory")
    verify.set_defaults(handler=cmd_verify)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference check of the model gradients")
    gradcheck.add_argument("--depth", type=int, default=2)
    gradcheck.add_argument("--objective", choices=["classifier", "mae", "both"], default="both")
    gradcheck.add_argument("--norm", choices=[p.value for p in NormPlacement], default="pre")
    gradcheck.add_argument("--cls", action="store_true", help="use a CLS token and head")
    gradcheck.add_argument("--tol", type=float, default=1e-5)
    gradcheck.add_argument("--h", type=float, default=1e-5)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    dump = commands.add_parser("dump-data", help="write a synthetic dataset to a binary file")
    dump.add_argument("spec", type=pathlib.Path, help="synthetic data spec file")
    dump.add_argument("output", type=pathlib.Path)
    dump.add_argument("--n", type=int, default=256)
    dump.set_defaults(handler=cmd_dump_data)
    return parser


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.precision:
        # Through the environment so worker processes see it too.
        os.environ[_tensor.PRECISION_ENV] = args.precision
    try:
        _tensor.default_dtype()
        return args.handler(args)
    except errors.PreconditionError as err:
        logger.error("Precondition unmet: %s", err)
        return Verdict.PRECONDITION_UNMET.exit_code
    except errors.BambooError as err:
        logger.error("%s: %s", type(err).__name__, err)
        return EXIT_ERROR
    except OSError as err:
        logger.error("%s", err)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
