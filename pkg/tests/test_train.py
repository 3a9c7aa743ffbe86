import logging
import math

import numpy as np
import pytest

import bamboo
from bamboo import _data
from bamboo import _tensor
from bamboo import _train
from bamboo import errors
from bamboo._model import Objective

from ._utils import tiny_config


def _dataset(n=8, dtype=None):
    spec = _data.SyntheticSpec(seq_len=4, patch_dim=3, num_classes=3, max_freq=1, noise_sigma=0.1)
    return _data.generate(spec, n, dtype=dtype)


def test_mask_size_rounds_half_up():
    """The mask should hold round(ratio * T) positions with halves rounded up."""
    rng = np.random.default_rng(0)

    assert len(bamboo.sample_mask(4, 0.125, rng)) == 1
    assert len(bamboo.sample_mask(10, 0.25, rng)) == 3
    assert len(bamboo.sample_mask(196, 0.75, rng)) == 147


def test_mask_positions_are_sorted_unique_and_offset():
    """Positions should be sorted, unique and shifted past the special tokens."""
    mask = bamboo.sample_mask(32, 0.5, np.random.default_rng(1), offset=1)

    assert len(mask) == 16
    assert list(mask.positions) == sorted(set(mask.positions))
    assert min(mask.positions) >= 1
    assert max(mask.positions) <= 32


def test_mask_covers_every_position_equally_often():
    """Over many draws each position should be masked at the mask ratio, within 2%."""
    rng = np.random.default_rng(0)
    counts = np.zeros(8)

    for _ in range(100_000):
        counts[list(bamboo.sample_mask(8, 0.5, rng).positions)] += 1

    assert np.all(np.abs(counts / 100_000 - 0.5) <= 0.02 * 0.5)


def test_empty_mask_errors():
    """A ratio that rounds to zero positions should raise."""
    with pytest.raises(errors.EmptyMaskError):
        bamboo.sample_mask(4, 0.1, np.random.default_rng(0))


def test_full_mask_warns(caplog):
    """Masking every token is allowed but should be logged."""
    with caplog.at_level(logging.WARNING, logger="bamboo._train"):
        mask = bamboo.sample_mask(4, 1.0, np.random.default_rng(0))

    assert mask.positions == (0, 1, 2, 3)
    assert "no visible context" in caplog.text


def test_masks_are_fresh_per_epoch_and_sample():
    """Masks should repeat for the same draw and change across epochs and samples."""
    config = tiny_config(seq_len=32)
    train_config = bamboo.TrainConfig(objective=Objective.MAE, seed=5)

    first = _train.mask_for(config, train_config, 0, 0)

    assert first == _train.mask_for(config, train_config, 0, 0)
    assert first != _train.mask_for(config, train_config, 1, 0)
    assert first != _train.mask_for(config, train_config, 0, 1)


def test_default_mask_ratio_depends_on_the_target():
    """Patch regression masks 75% by default and token codes 15%."""
    train_config = bamboo.TrainConfig(objective=Objective.MAE)

    assert train_config.resolved_mask_ratio(tiny_config()) == 0.75
    assert train_config.resolved_mask_ratio(tiny_config(vocab_bits=2)) == 0.15
    assert train_config.replace(mask_ratio=0.5).resolved_mask_ratio(tiny_config()) == 0.5


def test_mae_loss_with_and_without_patch_norm():
    """The loss should compare against normalized targets only when asked."""
    targets = np.array([[1.0, 2.0, 3.0], [0.0, 4.0, 8.0]])

    normalized = _train.normalize_targets(targets)

    assert np.allclose(normalized.mean(axis=1), 0.0)
    assert float(_train.mae_loss(normalized, targets).value) < 1e-10
    assert float(_train.mae_loss(np.zeros((2, 3)), np.ones((2, 3)), per_patch_norm=False).value) == 1.0
    with pytest.raises(errors.EmptyMaskError):
        _train.mae_loss(np.zeros((0, 3)), np.zeros((0, 3)))


def test_classifier_loss_of_uniform_logits_is_log_classes():
    """Equal logits over C classes should cost log C."""
    loss = _train.cls_loss(np.zeros(4), 2)

    assert math.isclose(float(loss.value), math.log(4), rel_tol=1e-12)


def test_normalized_mae_loss_ignores_per_patch_shift_and_scale():
    """Shifting and scaling each target patch should not change the normalized loss."""
    rng = np.random.default_rng(4)
    pred, targets = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
    scale, shift = rng.uniform(1.0, 4.0, (5, 1)), rng.uniform(-10.0, 10.0, (5, 1))

    base = float(_train.mae_loss(pred, targets).value)
    moved = float(_train.mae_loss(pred, targets * scale + shift).value)

    assert math.isclose(moved, base, rel_tol=1e-4)


def test_zero_prediction_against_normalized_targets_costs_one():
    """Predicting the patch mean scores the unit variance of normalized targets."""
    targets = np.random.default_rng(5).standard_normal((10, 16)) * 3 + 1

    loss = _train.mae_loss(np.zeros((10, 16)), targets)

    assert math.isclose(float(loss.value), 1.0, rel_tol=1e-5)


def test_confident_correct_logit_costs_nothing():
    """A logit of 50 on the right class should leave no loss."""
    loss = _train.cls_loss(np.array([50.0, 0.0, 0.0]), 0)

    assert 0.0 <= float(loss.value) < 1e-12


def test_classifier_loss_gradient_is_softmax_minus_onehot():
    """The logit gradient of cross-entropy should be the softmax less the one-hot label."""
    values = np.array([[1.0, -2.0, 0.5, 3.0]])
    logits = _tensor.leaf(values)

    _tensor.backward(_train.cls_loss(logits, 2))

    probs = np.exp(values) / np.exp(values).sum()
    assert np.allclose(logits.grad, probs - np.eye(4)[2], rtol=0, atol=1e-12)


def test_token_codes():
    """Token codes should read the sign bits of the leading features."""
    tokens = np.array([[1.0, -1.0, 1.0], [-1.0, 1.0, 1.0], [2.0, 3.0, -1.0]])

    assert _train.quantize_tokens(tokens, 2).tolist() == [1, 2, 3]
    with pytest.raises(errors.EmptyMaskError):
        _train.token_loss(np.zeros((0, 4)), [])


def test_adam_first_step_moves_by_the_learning_rate():
    """A bias-corrected first Adam step should move each coordinate by lr against the gradient."""
    params = bamboo.Parameters({"x": np.array([0.0, 1.0])})
    state = bamboo.TrainState.create(params)

    _train.adam_step(state, {"x": np.array([-6.0, 2.0])}, lr=0.1)

    assert np.allclose(state.params["x"], [0.1, 0.9])
    assert state.step == 1


def test_adam_minimizes_a_convex_quadratic():
    """Adam should reach the minimum of a quadratic bowl."""
    state = bamboo.TrainState.create(bamboo.Parameters({"x": np.zeros(3)}))
    target = np.array([3.0, -1.0, 0.5])

    for _ in range(1000):
        _train.adam_step(state, {"x": 2 * (state.params["x"] - target)}, lr=0.05)

    assert np.max(np.abs(state.params["x"] - target)) < 0.05


def test_adam_loss_never_increases_on_a_convex_bowl():
    """Far from the minimum, small Adam steps should lower a quadratic loss at every step."""
    state = bamboo.TrainState.create(bamboo.Parameters({"x": np.zeros(3)}))
    target = np.array([3.0, -2.0, 1.0])
    losses = []

    for _ in range(100):
        losses.append(float(((state.params["x"] - target) ** 2).sum()))
        _train.adam_step(state, {"x": 2 * (state.params["x"] - target)}, lr=0.005)

    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_adam_weight_decay_shrinks_parameters():
    """Decoupled weight decay should pull parameters towards zero without a gradient."""
    state = bamboo.TrainState.create(bamboo.Parameters({"x": np.ones(2)}))

    _train.adam_step(state, {}, lr=0.1, weight_decay=0.5)

    assert np.allclose(state.params["x"], 0.95)


def test_adam_rejects_non_finite_gradients():
    """A NaN gradient should stop the update."""
    state = bamboo.TrainState.create(bamboo.Parameters({"x": np.ones(2)}))

    with pytest.raises(errors.NonFiniteError):
        _train.adam_step(state, {"x": np.array([np.nan, 1.0])}, lr=0.1)


@pytest.mark.parametrize("objective", list(Objective))
def test_training_is_deterministic(objective):
    """Two runs with the same configs, data and seed should match exactly."""
    config = tiny_config()
    train_config = bamboo.TrainConfig(objective=objective, epochs=2, batch_size=4, seed=3)
    dataset = _dataset()

    first, first_records = bamboo.train(config, train_config, dataset)
    second, second_records = bamboo.train(config, train_config, dataset)

    assert first.params == second.params
    assert first_records == second_records
    assert [r.epoch for r in first_records] == [0, 1]
    assert first.step == 4
    assert first.params != bamboo.build(config, 3)


def test_training_records_accuracy_for_the_classifier_only():
    """Classifier epochs should report accuracy and mae epochs should not."""
    config = tiny_config()
    dataset = _dataset()

    _, cls_records = bamboo.train(config, bamboo.TrainConfig(objective=Objective.CLASSIFIER, epochs=1), dataset)
    _, mae_records = bamboo.train(config, bamboo.TrainConfig(objective=Objective.MAE, epochs=1), dataset)

    assert 0.0 <= cls_records[0].accuracy <= 1.0
    assert cls_records[0].stage == "classifier"
    assert mae_records[0].accuracy is None
    assert mae_records[0].stage == "mae"


def test_training_rejects_mismatched_data():
    """Data whose shape does not match the model should be refused."""
    with pytest.raises(errors.ShapeError):
        bamboo.train(
            tiny_config(seq_len=5),
            bamboo.TrainConfig(objective=Objective.CLASSIFIER, epochs=1),
            _dataset(),
        )


def test_divergence_carries_the_state_reached():
    """An absurd learning rate should overflow and raise with the partial state."""
    config = tiny_config()
    train_config = bamboo.TrainConfig(objective=Objective.CLASSIFIER, epochs=2, batch_size=4, learning_rate=1e30)

    with _tensor.precision("f32"):
        with pytest.raises(errors.DivergenceError) as info:
            bamboo.train(config, train_config, _dataset(dtype=np.float32))

    assert info.value.state is not None
    assert info.value.state.step >= 1
    assert info.value.state.history[-1].stage == "classifier"


def test_finetune_requires_the_pretraining_config():
    """Fine-tuning under a different model config should raise."""
    config = tiny_config()
    pretrained = bamboo.build(config, seed=0)

    with pytest.raises(errors.ConfigMismatchError):
        _train.finetune(
            config.replace(depth=2),
            bamboo.TrainConfig(objective=Objective.CLASSIFIER),
            _dataset(),
            pretrained,
            config,
        )


def test_finetune_keeps_the_encoder_and_reinitializes_heads():
    """Fine-tuning starts from the pretrained encoder with fresh heads."""
    config = tiny_config()
    pretrained = bamboo.build(config, seed=0)
    for name in pretrained.head_names():
        pretrained[name] = pretrained[name] + 1.0
    train_config = bamboo.TrainConfig(objective=Objective.CLASSIFIER, epochs=0, seed=9)

    state, records = _train.finetune(config, train_config, _dataset(), pretrained, config)

    fresh = bamboo.build(config, seed=9)
    assert records == []
    for name in pretrained.encoder_names():
        assert np.array_equal(state.params[name], pretrained[name])
    for name in pretrained.head_names():
        assert np.array_equal(state.params[name], fresh[name])


def test_pretrain_then_finetune_keeps_both_curves():
    """The fine-tuned state should carry the pretraining and fine-tuning history."""
    config = tiny_config()
    dataset = _dataset()

    state = bamboo.pretrain_then_finetune(
        config,
        bamboo.TrainConfig(objective=Objective.MAE, epochs=2, batch_size=4),
        bamboo.TrainConfig(objective=Objective.CLASSIFIER, epochs=1, batch_size=4),
        dataset,
        dataset,
    )

    assert [(r.stage, r.epoch) for r in state.history] == [("pretrain", 0), ("pretrain", 1), ("finetune", 0)]


def test_pretraining_must_be_masked():
    """The pretraining stage must use the mae objective."""
    cls = bamboo.TrainConfig(objective=Objective.CLASSIFIER)

    with pytest.raises(errors.ConfigError):
        bamboo.pretrain_then_finetune(tiny_config(), cls, cls, _dataset(), _dataset())


def _sine_steps(state, steps):
    for _ in range(steps):
        _train.adam_step(state, {n: np.sin(3 * t) for n, t in state.params.items()}, lr=0.01, weight_decay=0.1)
    return state


def test_resumed_training_state_matches_an_uninterrupted_run(tmp_path):
    """Saving and loading the optimizer state mid-run should not change any later update."""
    config = tiny_config(depth=2)
    path = tmp_path / "state.bms"
    uninterrupted = _sine_steps(bamboo.TrainState.create(bamboo.build(config, 0, dtype=np.float32)), 6)

    state = _sine_steps(bamboo.TrainState.create(bamboo.build(config, 0, dtype=np.float32)), 3)
    state.history.append(_train.EpochRecord("pretrain", 0, 0.5))
    state.save(path, config)
    loaded_config, resumed = bamboo.TrainState.load(path, dtype=np.float32)
    _sine_steps(resumed, 3)

    assert loaded_config == config
    assert resumed.step == 6
    assert resumed.history == [_train.EpochRecord("pretrain", 0, 0.5)]
    assert resumed.params == uninterrupted.params
    for name in uninterrupted.params:
        assert np.array_equal(resumed.first_moment[name], uninterrupted.first_moment[name])
        assert np.array_equal(resumed.second_moment[name], uninterrupted.second_moment[name])


@pytest.mark.parametrize("damage", ["magic", "header", "truncate", "trailing"])
def test_training_state_rejects_damaged_files(tmp_path, damage):
    """Corrupt state files should raise a FormatError."""
    config = tiny_config()
    path = tmp_path / "state.bms"
    bamboo.TrainState.create(bamboo.build(config, 0)).save(path, config)
    blob = path.read_bytes()
    if damage == "magic":
        blob = b"BMB1" + blob[4:]
    elif damage == "header":
        blob = blob[:8] + b"!" + blob[9:]
    elif damage == "truncate":
        blob = blob[:-5]
    else:
        blob = blob + b"\0\0\0\0"
    path.write_bytes(blob)

    with pytest.raises(errors.FormatError):
        bamboo.TrainState.load(path)


def test_training_state_refuses_a_mismatched_config(tmp_path):
    """A state should not be saved under a config its parameters were not built for."""
    state = bamboo.TrainState.create(bamboo.build(tiny_config(depth=1), 0))

    with pytest.raises(errors.ConfigMismatchError):
        state.save(tmp_path / "state.bms", tiny_config(depth=2))


def test_write_loss_csv(tmp_path):
    """Loss curves should append under a single header with blank missing accuracies."""
    path = tmp_path / "losses.csv"

    _train.write_loss_csv([_train.EpochRecord("pretrain", 0, 0.5)], path)
    _train.write_loss_csv([_train.EpochRecord("finetune", 0, 0.25, 0.75)], path)

    assert path.read_text() == (
        "stage,epoch,mean_loss,accuracy\n"
        "pretrain,0,0.5,\n"
        "finetune,0,0.25,0.75\n"
    )


def _separable(n=32):
    rng = np.random.default_rng(6)
    labels = np.arange(n) % 2
    tokens = 0.1 * rng.standard_normal((n, 4, 3))
    tokens[:, :, 0] += np.where(labels == 0, 1.0, -1.0)[:, None]
    return _data.Dataset(tokens, labels)


@pytest.mark.slow
def test_classifier_fits_separable_data():
    """Two well separated classes should be learned to 99% within 50 epochs."""
    config = tiny_config(num_classes=2)
    dataset = _separable()
    train_config = bamboo.TrainConfig(objective=Objective.CLASSIFIER, epochs=50, batch_size=8, learning_rate=1e-2)

    with _tensor.precision("f64"):
        state, records = bamboo.train(config, train_config, dataset)

    assert any(r.accuracy >= 0.99 for r in records)
    assert _train.accuracy(state.params, config, dataset) >= 0.99


@pytest.mark.slow
def test_pretraining_does_not_hurt_fine_tuning():
    """At matched total epochs, pretrain-then-finetune should match or beat scratch training in most of three seeds."""
    config = tiny_config(depth=2, width=16, seq_len=8, patch_dim=8, num_classes=2)
    spec = _data.SyntheticSpec(seq_len=8, patch_dim=8, num_classes=2, noise_sigma=0.1)
    train_set, test_set = _data.generate(spec, 160).split()
    scratch, pretrained = [], []

    for seed in (0, 1, 2):
        finetune = bamboo.TrainConfig(objective=Objective.CLASSIFIER, epochs=3, batch_size=8, seed=seed)
        pretrain = bamboo.TrainConfig(objective=Objective.MAE, epochs=5, batch_size=8, seed=seed)
        state, _ = bamboo.train(config, finetune.replace(epochs=8), train_set)
        scratch.append(_train.accuracy(state.params, config, test_set))
        state = bamboo.pretrain_then_finetune(config, pretrain, finetune, train_set, train_set)
        pretrained.append(_train.accuracy(state.params, config, test_set))

    assert sum(p >= s for p, s in zip(pretrained, scratch)) >= 2
