#!/usr/bin/env python3
"""
Tests for zero-shot evaluation, cross-validation, cross-domain and ablation.

Run:
    python test_evaluation.py
"""
import os
import sys

import numpy as np

from mvssl.config import load_run_config
from mvssl.data import PromptBank, SyntheticConfig, generate_synthetic, load_prompt_bank
from mvssl.encoders import ModelConfig, MultiviewModel, TextEncoder
from mvssl.errors import ConfigurationError, EmptyInputError, UnknownClassError
from mvssl.evaluation import (
    VARIANTS,
    AblationResult,
    DomainShiftConfig,
    Metrics,
    evaluate_fold,
    evaluate_views,
    fold_seed,
    make_shifted_dataset,
    prompt_similarity_gap,
    run_ablation,
    run_cross_domain,
    run_cross_validation,
    shifted_data_config,
    variant_config,
    zero_shot_classify,
    zero_shot_predict,
)
from mvssl.losses import LossConfig
from mvssl.tensor_core import Tensor
from mvssl.train import TrainConfig
from utils.script_runner import require_slow_tests, run_tests

BANK = load_prompt_bank("basic-six")
DATA_CONFIG = SyntheticConfig(n_subjects=4, samples_per_subject=6, input_dim=6, temporal_frames=0, seed=2)
DATASET = generate_synthetic(DATA_CONFIG, bank=BANK)
MODEL_CONFIG = ModelConfig(hidden=8, embed_dim=4, fusion_hidden=3)
TRAIN_CONFIG = TrainConfig(epochs=1, batch_size=8, learning_rate=1e-2, seed=3)


class _FixedEmbedding:
    """Stands in for a model whose fused embeddings are given directly."""

    def __init__(self, fused: np.ndarray, text: TextEncoder):
        self.fused = np.atleast_2d(fused)
        self.text = text

    def embed(self, views: np.ndarray):
        return [Tensor(self.fused)], Tensor(self.fused), None


def _orthogonal_bank():
    bank = PromptBank("pair", {"alpha": ["alpha"], "beta": ["beta"]})
    text = TextEncoder(bank.vocab_size, 2, np.random.default_rng(0))
    text.table.data = np.eye(2)
    return bank, text


def _model(seed: int = 0) -> MultiviewModel:
    return MultiviewModel(MODEL_CONFIG, DATASET.input_dim, BANK.vocab_size, seed=seed)


def test_metrics_hand_computed():
    metrics = Metrics.from_predictions([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert metrics.accuracy == 0.75
    assert np.allclose(metrics.precision, [1.0, 2.0 / 3.0])
    assert np.allclose(metrics.recall, [0.5, 1.0])
    assert np.allclose(metrics.f1, [2.0 / 3.0, 0.8])
    assert abs(metrics.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0) < 1e-12


def test_metrics_never_predicted_class_scores_zero():
    metrics = Metrics.from_predictions([0, 1, 2], [0, 0, 0], 3)
    assert metrics.precision.tolist() == [1.0 / 3.0, 0.0, 0.0]
    assert metrics.f1[1] == 0.0 and metrics.f1[2] == 0.0


def test_metrics_identities_hold_exactly():
    rng = np.random.default_rng(1)
    truth, guess = rng.integers(0, 5, 200), rng.integers(0, 5, 200)
    metrics = Metrics.from_predictions(truth, guess, 5)
    assert np.array_equal(metrics.support, np.bincount(truth, minlength=5))
    assert abs(metrics.accuracy - np.trace(metrics.confusion) / 200) < 1e-12
    assert abs(metrics.macro_f1 - metrics.f1.mean()) < 1e-12
    p = np.diag(metrics.confusion) / metrics.confusion.sum(axis=0)
    r = np.diag(metrics.confusion) / metrics.confusion.sum(axis=1)
    assert np.abs(metrics.f1 - 2 * p * r / (p + r)).max() < 1e-12
    assert abs(metrics.weighted_f1 - (metrics.f1 * metrics.support).sum() / 200) < 1e-12


def test_rigged_perfect_classifier():
    indices = np.arange(len(DATASET))
    metrics = evaluate_fold(None, DATASET, indices, BANK, classifier=lambda ds, idx: ds.class_ids[idx])
    assert metrics.accuracy == 1.0
    assert np.array_equal(metrics.confusion, np.diag(np.diag(metrics.confusion)))
    assert metrics.class_names == BANK.class_names


def test_constant_classifier_on_balanced_classes():
    indices = np.arange(len(DATASET))
    assert np.all(np.bincount(DATASET.class_ids) == 4)
    metrics = evaluate_fold(None, DATASET, indices, BANK, classifier=lambda ds, idx: np.zeros(len(idx)))
    assert abs(metrics.accuracy - 1.0 / 6.0) < 1e-12


def test_evaluate_fold_rejects_empty_split():
    try:
        evaluate_fold(_model(), DATASET, [], BANK)
    except EmptyInputError:
        pass
    else:
        raise AssertionError("expected EmptyInputError")


def test_one_class_bank_always_wins():
    bank = PromptBank("solo", {"calm": ["a calm face", "a still face"]})
    model = MultiviewModel(MODEL_CONFIG, DATASET.input_dim, bank.vocab_size)
    for i in range(5):
        class_id, sims = zero_shot_classify(DATASET.views[i], model, bank)
        assert class_id == 0 and sims.shape == (1,)


def test_embedding_on_a_centroid_is_that_class():
    bank, text = _orthogonal_bank()
    predicted, sims = zero_shot_predict(np.zeros((1, 1, 2)), _FixedEmbedding([[0.0, 3.0]], text), bank)
    assert predicted.tolist() == [1]
    assert sims[0].tolist() == [0.0, 1.0]


def test_ties_go_to_the_lowest_class_id():
    bank, text = _orthogonal_bank()
    predicted, _ = zero_shot_predict(np.zeros((1, 1, 2)), _FixedEmbedding([[1.0, 1.0]], text), bank)
    assert predicted.tolist() == [0]


def test_prediction_is_scale_invariant():
    rng = np.random.default_rng(4)
    text = MultiviewModel(MODEL_CONFIG, DATASET.input_dim, BANK.vocab_size).text
    fused = rng.normal(size=(30, 4))
    base, _ = zero_shot_predict(np.zeros((1, 30, 2)), _FixedEmbedding(fused, text), BANK)
    for scale in (0.5, 2.0, 10.0, 1e3):
        scaled, _ = zero_shot_predict(np.zeros((1, 30, 2)), _FixedEmbedding(scale * fused, text), BANK)
        assert np.array_equal(base, scaled)


def test_restricted_candidates_keep_global_ids():
    model = _model()
    views = DATASET.views[:10].transpose(1, 0, 2)
    predicted, sims = zero_shot_predict(views, model, BANK, classes=[4, 2])
    assert set(predicted.tolist()) <= {2, 4} and sims.shape == (10, 2)
    try:
        zero_shot_predict(views, model, BANK, classes=[6])
    except UnknownClassError:
        pass
    else:
        raise AssertionError("expected UnknownClassError")


def test_max_matching_and_single_view_evaluation():
    model = _model()
    indices = np.arange(12)
    max_metrics = evaluate_fold(model, DATASET, indices, BANK, match="max")
    assert max_metrics.n_samples == 12
    per_view = evaluate_views(model, DATASET, indices, BANK)
    assert list(per_view) == ["view 0 (-30 deg)", "view 1 (+0 deg)", "view 2 (+30 deg)", "fused"]
    assert all(m.n_samples == 12 for m in per_view.values())


def test_prompt_similarity_gap():
    for seed in range(5):
        text = MultiviewModel(ModelConfig(), DATASET.input_dim, BANK.vocab_size, seed=seed).text
        gap = prompt_similarity_gap(text, BANK)
        assert np.isfinite(gap) and 0.0 < gap <= 2.0, (seed, gap)
    bank, text = _orthogonal_bank()
    try:
        prompt_similarity_gap(text, bank)
    except EmptyInputError:
        pass
    else:
        raise AssertionError("expected EmptyInputError")


def test_two_fold_cross_validation():
    result = run_cross_validation(DATASET, 2, TRAIN_CONFIG, MODEL_CONFIG, BANK)
    assert len(result.folds) == 2 and len(result.rows()) == 2
    assert abs(result.mean_accuracy - np.mean([f.metrics.accuracy for f in result.folds])) < 1e-12
    assert result.pooled.n_samples == len(DATASET)
    assert np.array_equal(result.pooled.confusion, result.folds[0].metrics.confusion + result.folds[1].metrics.confusion)
    assert result.folds[1].seed == fold_seed(TRAIN_CONFIG.seed, 1)
    assert not set(result.folds[0].test_subjects) & set(result.folds[1].test_subjects)


def test_fold_subjects_ignore_sample_order():
    untrained = TrainConfig(epochs=0, batch_size=8, seed=3)
    shuffled = DATASET.subset(np.random.default_rng(5).permutation(len(DATASET)))
    original = run_cross_validation(DATASET, 4, untrained, MODEL_CONFIG, BANK)
    permuted = run_cross_validation(shuffled, 4, untrained, MODEL_CONFIG, BANK)
    assert [f.test_subjects for f in original.folds] == [f.test_subjects for f in permuted.folds]


def test_shifted_domain_shares_class_anchors():
    shifted = shifted_data_config(DATA_CONFIG, DomainShiftConfig())
    assert shifted.anchor_seed == DATA_CONFIG.seed
    assert shifted.view_seed == 1000 and shifted.seed == DATA_CONFIG.seed + 500
    assert shifted.noise_sd == 0.45


def test_cross_domain_on_the_source_domain_matches_in_domain():
    result = run_cross_domain(DATASET, DATASET, [0, 1], TRAIN_CONFIG, MODEL_CONFIG, BANK)
    assert result.metrics.accuracy == result.in_domain.accuracy
    assert not result.degenerate
    assert result.metrics.n_samples == int(np.isin(DATASET.class_ids, [0, 1]).sum())


def test_cross_domain_single_class_is_degenerate():
    result = run_cross_domain(DATASET, DATASET, [3], TRAIN_CONFIG, MODEL_CONFIG, BANK)
    assert result.degenerate and result.metrics.accuracy == 1.0
    try:
        run_cross_domain(DATASET, DATASET, [], TRAIN_CONFIG, MODEL_CONFIG, BANK)
    except ConfigurationError:
        pass
    else:
        raise AssertionError("expected ConfigurationError")


def test_improvement_matrix_is_antisymmetric():
    result = AblationResult({"full": 0.8, "no_red_min": 0.7, "no_vl_align": 0.55, "no_mv_bt": 0.61})
    m = result.improvement_matrix()
    assert np.array_equal(m + m.T, np.zeros((4, 4)))
    assert np.array_equal(np.diagonal(m), np.zeros(4))
    full = VARIANTS.index("full")
    for j, variant in enumerate(VARIANTS):
        assert abs(m[full, j] - (0.8 - result.accuracies[variant])) < 1e-12


def test_variant_config_zeroes_one_weight():
    assert variant_config(TRAIN_CONFIG, "no_vl_align").loss.beta == 0.0
    assert variant_config(TRAIN_CONFIG, "no_vl_align").loss.alpha == 1.0
    assert variant_config(TRAIN_CONFIG, "full") is TRAIN_CONFIG
    try:
        variant_config(TRAIN_CONFIG, "no_text")
    except ConfigurationError:
        pass
    else:
        raise AssertionError("expected ConfigurationError")


def test_ablation_runs_every_variant():
    result = run_ablation(DATASET, 2, TRAIN_CONFIG, MODEL_CONFIG, BANK)
    assert result.variants == list(VARIANTS)
    assert all(len(run.folds) == 2 for run in result.runs.values())
    assert [row["variant"] for row in result.rows()] == list(VARIANTS)


def test_ablation_needs_the_full_reference():
    partial = TrainConfig(epochs=1, batch_size=8, loss=LossConfig(gamma=0.0))
    try:
        run_ablation(DATASET, 2, partial, MODEL_CONFIG, BANK)
    except ConfigurationError:
        pass
    else:
        raise AssertionError("expected ConfigurationError")


def _default_benchmark(seed: int):
    config = load_run_config(seed=seed)
    bank = load_prompt_bank(config.prompts.mode)
    return config, generate_synthetic(config.data, bank), bank


def _jobs() -> int:
    return max(1, int(os.getenv("JOBS", "1")))


def test_default_benchmark_zero_shot_accuracy():
    require_slow_tests()
    accuracies = []
    for seed in range(3):
        config, dataset, bank = _default_benchmark(seed)
        assert dataset.oracle_accuracy > 0.95
        result = run_cross_validation(dataset, config.eval.folds, config.train, config.model, bank,
                                      config.eval.match, jobs=_jobs())
        accuracies.append(result.mean_accuracy)
    assert np.median(accuracies) >= 0.85, accuracies


def test_default_benchmark_ablation_direction():
    require_slow_tests()
    margins = {variant: [] for variant in VARIANTS[1:]}
    for seed in range(5):
        config, dataset, bank = _default_benchmark(seed)
        result = run_ablation(dataset, config.eval.folds, config.train, config.model, bank,
                              config.eval.match, jobs=_jobs())
        m = result.improvement_matrix()
        assert np.array_equal(m, -m.T)
        for variant in margins:
            margins[variant].append(result.accuracies["full"] - result.accuracies[variant])
    for variant, values in margins.items():
        assert np.median(values) >= 0.0, (variant, values)


def test_default_benchmark_cross_domain_degrades():
    require_slow_tests()
    gaps = []
    for seed in range(5):
        config, source, bank = _default_benchmark(seed)
        target = make_shifted_dataset(config.data, config.domain_shift, bank)
        result = run_cross_domain(source, target, config.eval.class_subset, config.train, config.model, bank,
                                  config.eval.match)
        assert not result.degenerate and result.metrics.confusion.shape == (2, 2)
        assert result.metrics.n_samples == int(np.isin(target.class_ids, config.eval.class_subset).sum())
        assert 0.0 <= result.metrics.accuracy <= 1.0 and np.isfinite(result.metrics.macro_f1)
        gaps.append(result.metrics.accuracy - result.in_domain.accuracy)
    assert np.median(gaps) <= 0.0, gaps


if __name__ == "__main__":
    sys.exit(run_tests(globals()))
