"""
Parameter and FLOP accounting, and compute-matched deeper-narrower configurations.

The cost of a configuration relative to a reference is the L·d² proxy: the
share of compute spent in the block weight matrices. Exact per-token FLOPs
are available separately through `flops_per_token`.
"""
import csv
import dataclasses
import decimal
import logging
import pathlib
import typing

from bamboo import errors
from bamboo._model import ModelConfig
from bamboo._model import NormPlacement


logger = logging.getLogger(__name__)

DEFAULT_BAND = (0.85, 1.15)
# Best plans further than this from the reference cost are logged.
COST_TOLERANCE = max(1 - DEFAULT_BAND[0], DEFAULT_BAND[1] - 1)
HEAD_DIM = 64
# ViT-style inputs: 16x16x3 patches of a 224x224 image, 1000 classes.
IMAGENET_SEQ_LEN = 196
IMAGENET_PATCH_DIM = 768
IMAGENET_NUM_CLASSES = 1000
PLAN_CSV_FIELDS = ["depth", "width", "heads", "cost_ratio", "rounded_cost", "param_count", "flops_per_token"]


@dataclasses.dataclass(frozen=True)
class ReferenceScale:
    name: str
    depth: int
    width: int
    heads: int

    @property
    def shape(self) -> typing.Tuple[int, int]:
        return self.depth, self.width


REFERENCE_SCALES = {
    scale.name: scale
    for scale in (
        ReferenceScale(name="base", depth=12, width=768, heads=12),
        ReferenceScale(name="large", depth=24, width=1024, heads=16),
        ReferenceScale(name="huge", depth=32, width=1280, heads=16),
    )
}


@dataclasses.dataclass(frozen=True)
class PlannedConfig:
    depth: int
    width: int
    heads: int
    cost_ratio: float
    param_count: int
    flops_per_token: int

    @property
    def rounded_cost(self) -> decimal.Decimal:
        return round_ratio(self.cost_ratio)

    def model_config(self, **fields: typing.Any) -> ModelConfig:
        """Build a ModelConfig with this depth, width and head count."""
        return ModelConfig(depth=self.depth, width=self.width, heads=self.heads, **fields)


@dataclasses.dataclass(frozen=True)
class TableEntry:
    """One column of a published configuration table."""

    table: str
    scale: str
    depth: int
    width: int
    heads: int
    printed_cost: str

    @property
    def reference(self) -> ReferenceScale:
        return REFERENCE_SCALES[self.scale]


TABLE_CONFIGS = (
    TableEntry(table="exploration", scale="base", depth=12, width=768, heads=12, printed_cost="1"),
    TableEntry(table="exploration", scale="base", depth=24, width=512, heads=8, printed_cost="0.9"),
    TableEntry(table="exploration", scale="base", depth=48, width=384, heads=6, printed_cost="1"),
    TableEntry(table="exploration", scale="base", depth=96, width=256, heads=4, printed_cost="0.9"),
    TableEntry(table="exploration", scale="large", depth=24, width=1024, heads=16, printed_cost="1"),
    TableEntry(table="exploration", scale="large", depth=48, width=768, heads=12, printed_cost="1.1"),
    TableEntry(table="exploration", scale="large", depth=60, width=640, heads=10, printed_cost="1"),
    TableEntry(table="exploration", scale="large", depth=96, width=512, heads=8, printed_cost="1"),
    TableEntry(table="bamboo", scale="base", depth=48, width=384, heads=6, printed_cost="1"),
    TableEntry(table="bamboo", scale="large", depth=48, width=768, heads=12, printed_cost="1.1"),
    TableEntry(table="bamboo", scale="huge", depth=64, width=896, heads=14, printed_cost="1"),
)


def resolve_reference(reference: typing.Union[str, ReferenceScale, typing.Tuple[int, int]]) -> typing.Tuple[int, int]:
    """Turn a scale name, a ReferenceScale or an explicit (L, d) into (L, d)."""
    if isinstance(reference, ReferenceScale):
        return reference.shape
    if isinstance(reference, str):
        try:
            return REFERENCE_SCALES[reference].shape
        except KeyError:
            raise errors.ConfigError(
                f"Unknown reference scale {reference!r}; expected one of {', '.join(REFERENCE_SCALES)}"
                " or an explicit depth,width pair"
            ) from None
    depth, width = reference
    if depth < 1 or width < 1:
        raise errors.ConfigError(f"Reference dimensions must be positive, got ({depth}, {width})")
    return int(depth), int(width)


def param_breakdown(config: ModelConfig) -> typing.Dict[str, int]:
    """Count the learnable scalars of a model, grouped by role."""
    depth, d, f = config.depth, config.width, config.ffn_width
    breakdown = {
        "block_weights": depth * (4 * d * d + 2 * d * f),
        "block_biases": depth * (4 * d + f + d),
        "block_norms": depth * 4 * d,
        "embedding": config.patch_dim * d + d,
        "positions": config.positions * d,
        "special_tokens": d * (1 + int(config.use_cls_token)),
        "final_norm": 2 * d if config.norm_placement is NormPlacement.PRE else 0,
        "classifier_head": d * config.num_classes + config.num_classes,
        "reconstruction_head": d * config.recon_dim + config.recon_dim,
    }
    return breakdown


def param_count(config: ModelConfig) -> int:
    return sum(param_breakdown(config).values())


def block_param_count(depth: int, width: int, ffn_mult: int = 4) -> int:
    """Weight-matrix scalars of the blocks alone: 12·L·d² at ffn_mult 4."""
    return depth * (4 + 2 * ffn_mult) * width * width


def cost_ratio(
    candidate: typing.Tuple[int, int], reference: typing.Union[str, ReferenceScale, typing.Tuple[int, int]]
) -> float:
    """Relative compute of (L, d) against a reference under the L·d² proxy."""
    depth, width = candidate
    ref_depth, ref_width = resolve_reference(reference)
    if depth < 1 or width < 1:
        raise errors.ConfigError(f"Candidate dimensions must be positive, got ({depth}, {width})")
    return (depth * width * width) / (ref_depth * ref_width * ref_width)


def round_ratio(ratio: float) -> decimal.Decimal:
    """Round a cost ratio to one decimal, halves away from zero."""
    return decimal.Decimal(repr(ratio)).quantize(decimal.Decimal("0.1"), rounding=decimal.ROUND_HALF_UP)


def format_cost(ratio: float) -> str:
    """Render a ratio the way the tables print it, e.g. `0.9×` or `1×`."""
    return f"{float(round_ratio(ratio)):g}×"


def flops_breakdown(config: ModelConfig, seq_len: typing.Optional[int] = None) -> typing.Dict[str, int]:
    """
    Forward FLOPs per token, counting a multiply-add as two.

    Weight matrices contribute 2 FLOPs per scalar; attention adds the
    query-key score products, 2·T·d per layer.
    """
    seq_len = config.seq_len if seq_len is None else seq_len
    if seq_len < 1:
        raise errors.ConfigError(f"seq_len must be >= 1, got {seq_len}")
    depth, d, f = config.depth, config.width, config.ffn_width
    return {
        "embedding": 2 * config.patch_dim * d,
        "attention_projections": 2 * depth * 4 * d * d,
        "feed_forward": 2 * depth * 2 * d * f,
        "attention_scores": 2 * depth * seq_len * d,
        "classifier_head": 2 * d * config.num_classes,
    }


def flops_per_token(config: ModelConfig, seq_len: typing.Optional[int] = None) -> int:
    return sum(flops_breakdown(config, seq_len).values())


def _imagenet_config(
    depth: int, width: int, heads: int, seq_len: int, patch_dim: int, num_classes: int
) -> ModelConfig:
    return ModelConfig(
        depth=depth, width=width, heads=heads, seq_len=seq_len, patch_dim=patch_dim, num_classes=num_classes
    )


def planned(
    depth: int,
    width: int,
    reference: typing.Union[str, ReferenceScale, typing.Tuple[int, int]],
    head_dim: int = HEAD_DIM,
    seq_len: int = IMAGENET_SEQ_LEN,
    patch_dim: int = IMAGENET_PATCH_DIM,
    num_classes: int = IMAGENET_NUM_CLASSES,
) -> PlannedConfig:
    """Describe one (L, d) against a reference, with heads fixed by the head dimension."""
    if width % head_dim:
        raise errors.ConfigError(f"Width {width} is not a multiple of the head dimension {head_dim}")
    heads = width // head_dim
    config = _imagenet_config(depth, width, heads, seq_len, patch_dim, num_classes)
    return PlannedConfig(
        depth=depth,
        width=width,
        heads=heads,
        cost_ratio=cost_ratio((depth, width), reference),
        param_count=param_count(config),
        flops_per_token=flops_per_token(config),
    )


def plan_widths(
    target_depth: int,
    reference: typing.Union[str, ReferenceScale, typing.Tuple[int, int]],
    band: typing.Tuple[float, float] = DEFAULT_BAND,
    multiple: int = HEAD_DIM,
    head_dim: int = HEAD_DIM,
    seq_len: int = IMAGENET_SEQ_LEN,
    patch_dim: int = IMAGENET_PATCH_DIM,
    num_classes: int = IMAGENET_NUM_CLASSES,
) -> typing.List[PlannedConfig]:
    """
    List every width that keeps `target_depth` inside the cost band.

    Widths step by `multiple`; candidates are sorted by distance of their
    ratio from 1, ties going to the narrower width. Choosing among them is
    left to the caller.

    :raises EmptyCandidateSetError:
        When no width lands in the band. The error carries the nearest
        widths just below and just above it.
    """
    low, high = band
    if not 0 < low <= 1 <= high:
        raise errors.ConfigError(f"Band must satisfy 0 < low <= 1 <= high, got {band}")
    if target_depth < 1 or multiple < 1 or head_dim < 1:
        raise errors.ConfigError("target_depth, multiple and head_dim must be >= 1")
    if multiple % head_dim:
        raise errors.ConfigError(
            f"Width multiple {multiple} must be a multiple of the head dimension {head_dim}"
        )
    resolved = resolve_reference(reference)

    def describe(width: int) -> PlannedConfig:
        return planned(target_depth, width, resolved, head_dim, seq_len, patch_dim, num_classes)

    below, inside, above = None, [], None
    width = multiple
    while True:
        ratio = cost_ratio((target_depth, width), resolved)
        if ratio > high:
            above = width
            break
        if ratio < low:
            below = width
        else:
            inside.append(width)
        width += multiple

    if not inside:
        suggestions = tuple(describe(w) for w in (below, above) if w is not None)
        raise errors.EmptyCandidateSetError(
            f"No width that is a multiple of {multiple} puts depth {target_depth} inside the band"
            f" [{low}, {high}] against {resolved}; nearest: "
            + ", ".join(f"{s.width} ({s.cost_ratio:.3f})" for s in suggestions),
            suggestions=suggestions,
        )
    candidates = sorted((describe(w) for w in inside), key=lambda c: (abs(c.cost_ratio - 1), c.width))
    if abs(candidates[0].cost_ratio - 1) > COST_TOLERANCE:
        logger.warning(
            "Closest plan for depth %d is %.3fx the reference cost", target_depth, candidates[0].cost_ratio
        )
    return candidates


def write_plan_csv(rows: typing.Iterable[PlannedConfig], path: typing.Union[str, pathlib.Path]) -> None:
    with open(path, "w", newline="") as stream:
        writer = csv.DictWriter(stream, fieldnames=PLAN_CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "depth": row.depth,
                    "width": row.width,
                    "heads": row.heads,
                    "cost_ratio": repr(row.cost_ratio),
                    "rounded_cost": str(row.rounded_cost),
                    "param_count": row.param_count,
                    "flops_per_token": row.flops_per_token,
                }
            )
