import logging
import pathlib

import pytest
import yaml

import bamboo
from bamboo import _planner
from bamboo import errors

from ._utils import tiny_config


SCENARIO_DIR = pathlib.Path(__file__).parent / "planner_scenarios"
SCENARIOS = sorted(SCENARIO_DIR.iterdir())


@pytest.mark.parametrize("scenario_file", SCENARIOS, ids=[s.stem for s in SCENARIOS])
def test_planner_scenarios(scenario_file: pathlib.Path):
    """Should list every in-band width in order of closeness to the reference cost."""
    scenario = yaml.safe_load(scenario_file.read_text())
    band = tuple(scenario.get("band", _planner.DEFAULT_BAND))

    if "suggestions" in scenario:
        with pytest.raises(errors.EmptyCandidateSetError) as info:
            bamboo.plan_widths(scenario["depth"], scenario["reference"], band=band)
        assert [s.width for s in info.value.suggestions] == scenario["suggestions"]
        return

    candidates = bamboo.plan_widths(scenario["depth"], scenario["reference"], band=band)

    assert len(candidates) == len(scenario["expected"])
    for candidate, expected in zip(candidates, scenario["expected"]):
        assert candidate.depth == scenario["depth"]
        assert candidate.width == expected["width"]
        assert candidate.heads == expected["heads"]
        assert candidate.cost_ratio == pytest.approx(expected["cost_ratio"], abs=1e-6)
        assert _planner.format_cost(candidate.cost_ratio) == expected["cost"]


@pytest.mark.parametrize("entry", _planner.TABLE_CONFIGS, ids=lambda e: f"{e.table}-{e.scale}-{e.depth}")
def test_published_configurations(entry: _planner.TableEntry):
    """Every published configuration should round to its printed cost and be an in-band candidate."""
    ratio = bamboo.cost_ratio((entry.depth, entry.width), entry.scale)
    widths = [c.width for c in bamboo.plan_widths(entry.depth, entry.scale)]

    assert str(_planner.round_ratio(ratio).normalize()) == entry.printed_cost
    assert entry.heads == entry.width // _planner.HEAD_DIM
    assert entry.width in widths


def test_cost_ratio_of_the_reference_is_one():
    """A configuration compared with itself costs exactly 1."""
    for scale in _planner.REFERENCE_SCALES.values():
        assert bamboo.cost_ratio(scale.shape, scale) == 1.0
    assert bamboo.cost_ratio((7, 320), (7, 320)) == 1.0


def test_round_ratio_rounds_halves_up():
    """Ratios are rounded to one decimal with halves going up."""
    assert str(_planner.round_ratio(1.05)) == "1.1"
    assert str(_planner.round_ratio(0.95)) == "1.0"
    assert str(_planner.round_ratio(0.8889)) == "0.9"
    assert _planner.format_cost(1.125) == "1.1×"


def test_unknown_reference_errors():
    """Only the named scales or explicit shapes are accepted."""
    with pytest.raises(errors.ConfigError):
        bamboo.cost_ratio((12, 768), "giant")
    with pytest.raises(errors.ConfigError):
        bamboo.cost_ratio((12, 768), (0, 768))


@pytest.mark.parametrize(
    "band, multiple",
    [((1.05, 1.15), 64), ((0.85, 0.95), 64), ((0.0, 1.15), 64), ((0.85, 1.15), 96)],
)
def test_bad_plan_settings(band, multiple):
    """Bands must contain 1 and widths must step in whole heads."""
    with pytest.raises(errors.ConfigError):
        bamboo.plan_widths(24, "base", band=band, multiple=multiple)


def test_far_best_candidate_warns(caplog):
    """A best candidate outside the default cost tolerance is logged."""
    with caplog.at_level(logging.WARNING, logger="bamboo._planner"):
        for depth in (12, 24, 48, 96):
            bamboo.plan_widths(depth, "base")
        candidates = bamboo.plan_widths(24, "base", band=(0.5, 1.5))

    assert [c.width for c in candidates] == [512, 576, 448, 640, 384]
    assert candidates[-1].cost_ratio == 0.5
    assert not caplog.text

    with caplog.at_level(logging.WARNING, logger="bamboo._planner"):
        candidates = bamboo.plan_widths(12, "base", band=(0.3, 2.0), multiple=512)

    assert [c.width for c in candidates] == [512, 1024]
    assert "Closest plan for depth 12" in caplog.text


def test_small_head_dimension_planning():
    """Desk-scale sweeps can plan with narrow heads against an explicit reference."""
    plans = {
        depth: bamboo.plan_widths(depth, (2, 128), multiple=16, head_dim=16)[0]
        for depth in (4, 8, 16)
    }

    assert {d: (p.width, p.heads) for d, p in plans.items()} == {4: (96, 6), 8: (64, 4), 16: (48, 3)}
    assert plans[8].cost_ratio == 1.0


def test_block_param_count():
    """The block weights hold 12·L·d² scalars."""
    assert _planner.block_param_count(12, 768) == 84_934_656
    assert _planner.block_param_count(1, 64) == 49_152


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"depth": 3},
        {"use_cls_token": True},
        {"norm_placement": bamboo.NormPlacement.POST},
        {"vocab_bits": 2},
        {"ffn_mult": 2, "num_classes": 5},
    ],
)
def test_param_count_matches_built_model(overrides):
    """The counted parameters should equal the scalars of a built model."""
    config = tiny_config(**overrides)

    assert bamboo.param_count(config) == bamboo.build(config, seed=0).size()


def test_param_breakdown_block_weights():
    """The block weight group should match the 12·L·d² formula."""
    config = tiny_config(depth=4, width=16, heads=2)

    assert _planner.param_breakdown(config)["block_weights"] == _planner.block_param_count(4, 16)


def test_flops_of_deeper_narrower_base():
    """The deep-narrow base layout should cost within 2% of the original in FLOPs."""
    base = _planner.planned(12, 768, "base")
    deep = _planner.planned(48, 384, "base")

    assert base.flops_per_token == 176_197_632
    assert deep.flops_per_token == 178_452_480
    assert deep.flops_per_token / base.flops_per_token == pytest.approx(1.0128, abs=1e-4)


def test_attention_scores_are_a_small_share_at_base():
    """Score products are about 2% of the base model's forward FLOPs."""
    config = _planner.planned(12, 768, "base").model_config(seq_len=196, patch_dim=768, num_classes=1000)
    breakdown = _planner.flops_breakdown(config)

    assert breakdown["attention_scores"] / sum(breakdown.values()) == pytest.approx(0.0205, abs=1e-3)


def test_flops_grow_with_depth_and_width():
    """Deeper or wider models should cost more FLOPs per token."""
    config = tiny_config(depth=2, width=16, heads=2)

    assert bamboo.flops_per_token(config.replace(depth=3)) > bamboo.flops_per_token(config)
    assert bamboo.flops_per_token(config.replace(width=32)) > bamboo.flops_per_token(config)
    assert bamboo.flops_per_token(config, seq_len=64) > bamboo.flops_per_token(config)


def test_planned_config_builds_a_model_config():
    """A planned row should turn into a valid ModelConfig."""
    row = _planner.planned(16, 48, (2, 128), head_dim=16)

    config = row.model_config(seq_len=16, patch_dim=16)

    assert (config.depth, config.width, config.heads) == (16, 48, 3)


def test_write_plan_csv(tmp_path):
    """Plans should serialize one row per configuration."""
    path = tmp_path / "plan.csv"

    _planner.write_plan_csv(bamboo.plan_widths(24, "base"), path)

    lines = path.read_text().splitlines()
    assert lines[0] == "depth,width,heads,cost_ratio,rounded_cost,param_count,flops_per_token"
    assert lines[1].startswith("24,512,8,0.888")
    assert lines[1].split(",")[4] == "0.9"
    assert len(lines) == 3
