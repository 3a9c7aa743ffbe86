"""SVG line plots of diagnostics and depth sweeps. Needs the `plot` extra."""
import pathlib
import typing

from bamboo import errors

if typing.TYPE_CHECKING:
    from bamboo._diagnostics import DiagnosticReport


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise errors.MissingDependencyError(
            "Plotting needs matplotlib; install it with `pip install bamboo[plot]`"
        ) from None
    matplotlib.use("Agg")
    # Fixed ids so repeated runs produce identical files.
    matplotlib.rcParams["svg.hashsalt"] = "bamboo"
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: typing.Union[str, pathlib.Path]) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_diagnostics(
    reports: typing.Mapping[str, "DiagnosticReport"],
    path: typing.Union[str, pathlib.Path],
    title: str = "",
) -> None:
    """Plot ms and centered cosine against the layer index, one line per report."""
    plt = _pyplot()
    fig, (ms_axis, cos_axis) = plt.subplots(1, 2, figsize=(10, 4))
    for label, report in reports.items():
        layers = range(len(report.ms))
        ms_axis.plot(layers, report.ms, marker="o", label=label)
        cos_axis.plot(layers, report.centered_cos, marker="o", label=label)
    ms_axis.set_xlabel("Layer")
    ms_axis.set_ylabel("Mean token std")
    cos_axis.set_xlabel("Layer")
    cos_axis.set_ylabel("Centered pair cosine")
    for axis in (ms_axis, cos_axis):
        axis.grid(True, linestyle="--", alpha=0.6)
        axis.legend()
    if title:
        fig.suptitle(title)
    _save(fig, path)
    plt.close(fig)


def plot_sweep(
    rows: typing.Sequence[typing.Mapping[str, typing.Any]],
    path: typing.Union[str, pathlib.Path],
    title: str = "",
) -> None:
    """Plot seed-averaged test accuracy against depth for both training routes."""
    plt = _pyplot()
    depths = sorted({row["depth"] for row in rows})
    fig, axis = plt.subplots(figsize=(6, 4))
    for column, label in (("scratch_accuracy", "classifier"), ("finetuned_accuracy", "mae + finetune")):
        means = [
            sum(r[column] for r in rows if r["depth"] == depth)
            / sum(1 for r in rows if r["depth"] == depth)
            for depth in depths
        ]
        axis.plot(depths, means, marker="o", label=label)
    axis.set_xscale("log", base=2)
    axis.set_xlabel("Depth")
    axis.set_ylabel("Test accuracy")
    axis.grid(True, linestyle="--", alpha=0.6)
    axis.legend()
    if title:
        axis.set_title(title)
    _save(fig, path)
    plt.close(fig)
