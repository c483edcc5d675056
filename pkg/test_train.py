#!/usr/bin/env python3
"""
Tests for the optimizer, training loop, resume and gradient checks.

Run:
    python test_train.py
"""
import math
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from mvssl.config import load_run_config
from mvssl.data import SyntheticConfig, generate_synthetic, kfold_subject_split, load_prompt_bank, make_batch
from mvssl.encoders import ModelConfig, MultiviewModel
from mvssl.errors import BatchTooSmallError, ConfigurationError, DivergenceError
from mvssl.losses import LossConfig
from mvssl.tensor_core import Tensor
from mvssl.train import (
    METRIC_COLUMNS,
    Adam,
    TrainConfig,
    batch_rng,
    build_optimizer,
    epoch_batches,
    forward_losses,
    fusion_entropy,
    gradient_check_suite,
    run_training,
    scheduled_learning_rate,
    train_step,
)
from utils.script_runner import require_slow_tests, run_tests

BANK = load_prompt_bank("basic-six")
DATASET = generate_synthetic(
    SyntheticConfig(n_subjects=4, samples_per_subject=6, input_dim=6, temporal_frames=0, seed=1),
    bank=BANK,
)
MODEL_CONFIG = ModelConfig(hidden=8, embed_dim=4, fusion_hidden=3)
TRAIN_INDICES = np.arange(len(DATASET))


def _config(**overrides) -> TrainConfig:
    settings = dict(epochs=2, batch_size=8, learning_rate=1e-2, seed=5)
    settings.update(overrides)
    return TrainConfig(**settings)


def _batch(indices=(0, 1, 2, 3, 4, 5)):
    return make_batch(DATASET, list(indices), BANK, np.random.default_rng(0))


def test_adam_without_gradient_or_decay_is_a_no_op():
    p = Tensor.parameter([1.0, -2.0], "p")
    optimizer = Adam([p], learning_rate=0.1, weight_decay=0.0)
    optimizer.step()
    assert np.array_equal(p.data, [1.0, -2.0])
    assert optimizer.state.step == 1


def test_adam_first_step_moves_by_learning_rate():
    p = Tensor.parameter([1.0, -2.0], "p")
    optimizer = Adam([p], learning_rate=0.1)
    p.grad = np.array([4.0, -0.5])
    optimizer.step()
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_adam_rejects_unnamed_or_duplicate_parameters():
    try:
        Adam([Tensor.parameter([1.0], "p"), Tensor.parameter([2.0], "p")])
    except ConfigurationError:
        pass
    else:
        raise AssertionError("expected ConfigurationError")


def test_zero_loss_weights_apply_weight_decay_only():
    config = _config(weight_decay=0.5, loss=LossConfig(alpha=0.0, beta=0.0, gamma=0.0))
    model = MultiviewModel(MODEL_CONFIG, DATASET.input_dim, BANK.vocab_size, seed=0)
    before = {p.name: p.data.copy() for p in model.parameters()}
    optimizer = build_optimizer(model, config)
    breakdown = train_step(_batch(), model, config, optimizer, np.random.default_rng(0))
    assert breakdown.total.item() == 0.0
    for p in model.parameters():
        assert np.array_equal(p.data, before[p.name] - 1e-2 * 0.5 * before[p.name])


def test_forward_losses_total_matches_weighted_parts():
    loss = LossConfig(alpha=0.7, beta=1.3, gamma=0.4)
    model = MultiviewModel(MODEL_CONFIG, DATASET.input_dim, BANK.vocab_size)
    breakdown = forward_losses(_batch(), model, loss, _config().augment, np.random.default_rng(2))
    expected = 0.7 * breakdown.mv_bt.item() + 1.3 * breakdown.vl_align.item() + 0.4 * breakdown.red_min.item()
    assert abs(breakdown.total.item() - expected) < 1e-12
    assert set(breakdown.diagnostics) == {"cbar_diag_mean", "cbar_offdiag_mean", "fusion_entropy"}


def test_forward_losses_needs_two_samples():
    model = MultiviewModel(MODEL_CONFIG, DATASET.input_dim, BANK.vocab_size)
    try:
        forward_losses(_batch([3]), model, LossConfig(), _config().augment, np.random.default_rng(0))
    except BatchTooSmallError:
        pass
    else:
        raise AssertionError("expected BatchTooSmallError")


def test_exploding_loss_raises_divergence():
    model = MultiviewModel(MODEL_CONFIG, DATASET.input_dim, BANK.vocab_size)
    model.visual.wp.data *= 1e5
    loss = LossConfig(standardize=False)
    try:
        forward_losses(_batch(), model, loss, _config().augment, np.random.default_rng(0))
    except DivergenceError as e:
        assert e.component == "mv_bt"
        assert e.exit_code == 4
    else:
        raise AssertionError("expected DivergenceError")


def test_epoch_batches_drop_a_single_leftover():
    sizes = [len(chunk) for _, chunk in epoch_batches(np.arange(9), 4, seed=0, epoch=1)]
    assert sizes == [4, 4]
    sizes = [len(chunk) for _, chunk in epoch_batches(np.arange(10), 4, seed=0, epoch=1)]
    assert sizes == [4, 4, 2]
    first = [c.tolist() for _, c in epoch_batches(np.arange(10), 4, seed=0, epoch=1)]
    second = [c.tolist() for _, c in epoch_batches(np.arange(10), 4, seed=0, epoch=2)]
    assert first != second


def test_batch_rng_streams_are_independent():
    assert batch_rng(0, 1, 0).random() == batch_rng(0, 1, 0).random()
    assert batch_rng(0, 1, 0).random() != batch_rng(0, 1, 1).random()


def test_training_is_deterministic():
    model_a, log_a = run_training(DATASET, TRAIN_INDICES, _config(), MODEL_CONFIG, BANK)
    model_b, log_b = run_training(DATASET, TRAIN_INDICES, _config(), MODEL_CONFIG, BANK)
    assert model_a.digest() == model_b.digest()
    assert log_a == log_b
    assert len(log_a) == 3 and log_a[0]["epoch"] == 0 and log_a[-1]["epoch"] == 2
    assert all(set(METRIC_COLUMNS) == set(row) for row in log_a)


def test_zero_epochs_returns_the_initial_model():
    model, log = run_training(DATASET, TRAIN_INDICES, _config(epochs=0), MODEL_CONFIG, BANK)
    assert log == []
    assert model.digest() == MultiviewModel(MODEL_CONFIG, DATASET.input_dim, BANK.vocab_size, seed=5).digest()


def test_frozen_text_encoder_survives_training():
    initial = MultiviewModel(MODEL_CONFIG, DATASET.input_dim, BANK.vocab_size, seed=5)
    model, _ = run_training(DATASET, TRAIN_INDICES, _config(), MODEL_CONFIG, BANK)
    assert np.array_equal(model.text.table.data, initial.text.table.data)
    assert not np.array_equal(model.visual.w1.data, initial.visual.w1.data)


def test_resumed_run_matches_uninterrupted_run():
    full, full_log = run_training(DATASET, TRAIN_INDICES, _config(epochs=3), MODEL_CONFIG, BANK)
    with tempfile.TemporaryDirectory() as tmp:
        run_training(DATASET, TRAIN_INDICES, _config(epochs=3, checkpoint_every=1), MODEL_CONFIG, BANK,
                     checkpoint_dir=tmp)
        assert (Path(tmp) / "epoch_0002.json").exists() and (Path(tmp) / "final.f64").exists()
        resumed, resumed_log = run_training(DATASET, TRAIN_INDICES, _config(epochs=3), MODEL_CONFIG, BANK,
                                            resume_from=Path(tmp) / "epoch_0001")
    assert resumed.digest() == full.digest()
    assert resumed_log == full_log


def test_disabled_component_ignores_its_hyperparameters():
    off = {"mv_bt": False, "vl_align": True, "red_min": True}
    model_a, _ = run_training(DATASET, TRAIN_INDICES, _config(components=off), MODEL_CONFIG, BANK)
    model_b, _ = run_training(
        DATASET, TRAIN_INDICES,
        _config(components=off, loss=LossConfig(lambda_mv_bt=0.9)),
        MODEL_CONFIG, BANK,
    )
    model_c, _ = run_training(DATASET, TRAIN_INDICES, _config(loss=LossConfig(alpha=0.0)), MODEL_CONFIG, BANK)
    assert model_a.digest() == model_b.digest() == model_c.digest()


def test_training_config_validation():
    for bad in (dict(batch_size=1), dict(epochs=-1), dict(lr_schedule="step"),
                dict(components={"mv_bt": True, "ssl": True})):
        try:
            _config(**bad).validate()
        except ConfigurationError:
            pass
        else:
            raise AssertionError(f"expected ConfigurationError for {bad}")


def test_learning_rate_schedules():
    constant = _config()
    assert scheduled_learning_rate(constant, 7, 10) == constant.learning_rate
    cosine = _config(lr_schedule="cosine")
    assert scheduled_learning_rate(cosine, 0, 10) == cosine.learning_rate
    assert abs(scheduled_learning_rate(cosine, 10, 10)) < 1e-18
    assert abs(scheduled_learning_rate(cosine, 5, 10) - 0.5 * cosine.learning_rate) < 1e-15


def test_fusion_entropy():
    assert abs(fusion_entropy(np.full((4, 3), 1.0 / 3.0)) - math.log(3)) < 1e-12
    assert fusion_entropy(np.array([[1.0, 0.0]])) == 0.0


def test_gradient_check_suite_passes():
    rows = gradient_check_suite(seed=0)
    assert [r["check"] for r in rows] == [
        "mv_bt_loss", "vl_align_loss", "red_min_loss", "joint_loss", "model_composite"
    ]
    for row in rows:
        assert row["passed"], f"{row['check']}: {row['max_rel_error']:.3e}"


def _default_fold(seed: int, **train_overrides):
    config = load_run_config(seed=seed)
    bank = load_prompt_bank(config.prompts.mode)
    dataset = generate_synthetic(config.data, bank)
    train_indices, _ = kfold_subject_split(dataset, config.eval.folds, seed=config.seed)[0]
    train_config = replace(config.train, **train_overrides) if train_overrides else config.train
    return dataset, train_indices, train_config, config.model, bank


def test_default_benchmark_loss_falls_over_ten_epochs():
    dataset, train_indices, config, model_config, bank = _default_fold(0, epochs=10)
    _, log = run_training(dataset, train_indices, config, model_config, bank)
    assert log[10]["epoch"] == 10
    assert log[10]["total"] < log[1]["total"], (log[1]["total"], log[10]["total"])


def test_default_benchmark_decorrelates_the_views():
    require_slow_tests()
    reductions, diagonals = [], []
    for seed in range(5):
        dataset, train_indices, config, model_config, bank = _default_fold(seed)
        _, log = run_training(dataset, train_indices, config, model_config, bank)
        first, last = log[0], log[-1]
        assert last["epoch"] == 200
        reductions.append(1.0 - last["cbar_offdiag_mean"] / first["cbar_offdiag_mean"])
        diagonals.append(last["cbar_diag_mean"])
    assert np.median(reductions) >= 0.5, reductions
    assert 0.8 <= np.median(diagonals) <= 1.2, diagonals


if __name__ == "__main__":
    sys.exit(run_tests(globals()))
