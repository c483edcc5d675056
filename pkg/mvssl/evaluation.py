"""Zero-shot evaluation, cross-validation, cross-domain transfer and ablation.

Classification needs no classifier head: a sample's fused embedding is scored
by cosine similarity against each class's prompt embeddings and the best class
wins (lowest id on ties).
"""
import multiprocessing as mp
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mvssl.data import (
    MultiviewDataset,
    PromptBank,
    SyntheticConfig,
    generate_synthetic,
    kfold_subject_split,
)
from mvssl.encoders import ModelConfig, MultiviewModel, TextEncoder
from mvssl.errors import ConfigurationError, EmptyInputError, UnknownClassError
from mvssl.tensor_core import Tensor, cosine_matrix, stack
from mvssl.train import TrainConfig, run_training
from utils.logger import setup_logger

logger = setup_logger(__name__)

MATCH_MODES = ("centroid", "max")
VARIANTS = ("full", "no_red_min", "no_vl_align", "no_mv_bt")
_VARIANT_WEIGHT = {"no_red_min": "gamma", "no_vl_align": "beta", "no_mv_bt": "alpha"}

Classifier = Callable[[MultiviewDataset, np.ndarray], np.ndarray]


@dataclass
class EvalConfig:
    """Evaluation protocol settings."""
    folds: int = 10
    match: str = "centroid"
    class_subset: List[int] = field(default_factory=lambda: [0, 1])

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigurationError(f"eval.folds must be >= 2, got {self.folds}")
        if self.match not in MATCH_MODES:
            raise ConfigurationError(f"eval.match must be one of {MATCH_MODES}, got '{self.match}'")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class DomainShiftConfig:
    """How the target domain differs from the source: new view maps, new subjects, more noise."""
    view_seed: int = 1000
    subject_seed_offset: int = 500
    noise_sd: float = 0.45

    def validate(self) -> None:
        if self.noise_sd < 0:
            raise ConfigurationError("domain_shift.noise_sd must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------

def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


@dataclass
class Metrics:
    """
    Classification metrics derived from one confusion matrix.

    Rows of ``confusion`` are true classes, columns predicted classes. Every
    other figure is computed from it, so the algebraic identities hold exactly.
    Precision of a never-predicted class and F1 with P + R = 0 are 0.
    """
    confusion: np.ndarray
    class_names: List[str] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, true_ids: Sequence[int], predicted_ids: Sequence[int], n_classes: int,
                         class_names: Optional[Sequence[str]] = None) -> "Metrics":
        confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(confusion, (np.asarray(true_ids, dtype=np.int64), np.asarray(predicted_ids, dtype=np.int64)), 1)
        names = list(class_names) if class_names else [str(i) for i in range(n_classes)]
        return cls(confusion, names)

    @classmethod
    def pooled(cls, parts: Sequence["Metrics"]) -> "Metrics":
        if not parts:
            raise EmptyInputError("cannot pool an empty list of metrics")
        return cls(sum(p.confusion for p in parts), list(parts[0].class_names))

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    @property
    def accuracy(self) -> float:
        total = self.n_samples
        return float(np.trace(self.confusion) / total) if total else 0.0

    @property
    def precision(self) -> np.ndarray:
        return _safe_ratio(np.diag(self.confusion).astype(np.float64), self.confusion.sum(axis=0).astype(np.float64))

    @property
    def recall(self) -> np.ndarray:
        return _safe_ratio(np.diag(self.confusion).astype(np.float64), self.support.astype(np.float64))

    @property
    def f1(self) -> np.ndarray:
        p, r = self.precision, self.recall
        return _safe_ratio(2.0 * p * r, p + r)

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean()) if self.f1.size else 0.0

    @property
    def weighted_f1(self) -> float:
        total = self.n_samples
        return float((self.f1 * self.support).sum() / total) if total else 0.0

    def per_class_rows(self) -> List[Dict[str, Any]]:
        p, r, f = self.precision, self.recall, self.f1
        return [
            {"class": name, "precision": float(p[i]), "recall": float(r[i]), "f1": float(f[i]),
             "support": int(self.support[i])}
            for i, name in enumerate(self.class_names)
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "n_samples": self.n_samples,
            "per_class": self.per_class_rows(),
            "confusion": self.confusion.tolist(),
        }


# ----------------------------------------------------------------------
# zero-shot classification
# ----------------------------------------------------------------------

def template_embeddings(text_encoder: TextEncoder, bank: PromptBank) -> Dict[int, Tensor]:
    """Embeddings of every template, keyed by class id (templates × d)."""
    if bank.n_classes == 0:
        raise ConfigurationError("prompt bank is empty")
    return {
        class_id: stack([text_encoder.encode_text(bank.tokenize(t)) for t in bank.templates_for(class_id)])
        for class_id in range(bank.n_classes)
    }


def class_centroids(text_encoder: TextEncoder, bank: PromptBank) -> np.ndarray:
    """C×d matrix of per-class mean template embeddings."""
    embeddings = template_embeddings(text_encoder, bank)
    return np.stack([embeddings[c].data.mean(axis=0) for c in range(bank.n_classes)])


def _class_scores(visual: np.ndarray, text_encoder: TextEncoder, bank: PromptBank, match: str,
                  classes: Sequence[int]) -> np.ndarray:
    if match == "centroid":
        centroids = class_centroids(text_encoder, bank)[list(classes)]
        return cosine_matrix(visual, centroids).data
    if match == "max":
        embeddings = template_embeddings(text_encoder, bank)
        return np.stack([cosine_matrix(visual, embeddings[c]).data.max(axis=1) for c in classes], axis=1)
    raise ConfigurationError(f"unknown match mode '{match}'")


def _argmax_lowest(scores: np.ndarray) -> np.ndarray:
    best = scores.max(axis=1, keepdims=True)
    ties = (scores == best).sum(axis=1) > 1
    if ties.any():
        logger.warning(f"zero-shot: {int(ties.sum())} sample(s) tied between classes, lowest class id taken")
    return np.argmax(scores, axis=1)


def zero_shot_predict(views: np.ndarray, model: MultiviewModel, bank: PromptBank, match: str = "centroid",
                      view: Optional[int] = None,
                      classes: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Classify a batch of samples (views N×B×input_dim).

    Args:
        view: score with this view's embedding only instead of the fused one
        classes: restrict candidates to these class ids (returned ids stay global)

    Returns:
        (predicted class ids, B×|classes| similarity matrix)
    """
    if bank.n_classes == 0:
        raise ConfigurationError("prompt bank is empty")
    candidates = list(range(bank.n_classes)) if classes is None else list(classes)
    if not candidates:
        raise ConfigurationError("zero-shot candidate class list is empty")
    for c in candidates:
        if not 0 <= c < bank.n_classes:
            raise UnknownClassError(f"class id {c} not in prompt bank '{bank.mode}'")

    per_view, fused, _ = model.embed(np.asarray(views, dtype=np.float64))
    if view is None:
        visual = fused.data
    else:
        if not 0 <= view < len(per_view):
            raise ConfigurationError(f"view index {view} out of range for {len(per_view)} views")
        visual = per_view[view].data
    scores = _class_scores(visual, model.text, bank, match, candidates)
    return np.asarray(candidates, dtype=np.int64)[_argmax_lowest(scores)], scores


def zero_shot_classify(sample_views: np.ndarray, model: MultiviewModel, bank: PromptBank,
                       match: str = "centroid") -> Tuple[int, np.ndarray]:
    """Classify one sample (views N×input_dim); returns (class id, similarity per class)."""
    views = np.asarray(sample_views, dtype=np.float64)[:, None, :]
    predicted, scores = zero_shot_predict(views, model, bank, match)
    return int(predicted[0]), scores[0]


def evaluate_fold(model: Optional[MultiviewModel], dataset: MultiviewDataset, test_indices: Sequence[int],
                  bank: PromptBank, match: str = "centroid", view: Optional[int] = None,
                  classifier: Optional[Classifier] = None) -> Metrics:
    """
    Zero-shot classify every test sample and aggregate.

    ``classifier`` replaces the model-based prediction (dataset, indices → ids).
    """
    test_indices = np.asarray(test_indices, dtype=np.int64)
    if test_indices.size == 0:
        raise EmptyInputError("evaluate_fold needs at least one test sample")
    if classifier is not None:
        predicted = np.asarray(classifier(dataset, test_indices), dtype=np.int64)
    else:
        views = dataset.views[test_indices].transpose(1, 0, 2)
        predicted, _ = zero_shot_predict(views, model, bank, match, view=view)
    return Metrics.from_predictions(dataset.class_ids[test_indices], predicted, bank.n_classes, bank.class_names)


def evaluate_views(model: MultiviewModel, dataset: MultiviewDataset, test_indices: Sequence[int],
                   bank: PromptBank, match: str = "centroid") -> Dict[str, Metrics]:
    """Single-view metrics for each view next to the fused-embedding metrics."""
    results = {}
    for i, angle in enumerate(dataset.view_angles):
        results[f"view {i} ({angle:+.0f} deg)"] = evaluate_fold(model, dataset, test_indices, bank, match, view=i)
    results["fused"] = evaluate_fold(model, dataset, test_indices, bank, match)
    return results


def prompt_similarity_gap(text_encoder: TextEncoder, bank: PromptBank) -> float:
    """Mean within-class minus mean between-class cosine over all template pairs."""
    embeddings = template_embeddings(text_encoder, bank)
    labels = np.concatenate([[c] * embeddings[c].shape[0] for c in range(bank.n_classes)])
    everything = np.concatenate([embeddings[c].data for c in range(bank.n_classes)])
    sims = cosine_matrix(everything, everything).data
    same = labels[:, None] == labels[None, :]
    off_self = ~np.eye(len(labels), dtype=bool)
    within = sims[same & off_self]
    between = sims[~same]
    if within.size == 0 or between.size == 0:
        raise EmptyInputError("prompt_similarity_gap needs >= 2 classes with >= 2 templates")
    return float(within.mean() - between.mean())


# ----------------------------------------------------------------------
# cross-validation
# ----------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    seed: int
    metrics: Metrics
    test_subjects: List[int]
    final_loss: Dict[str, float]


@dataclass
class CrossValidationResult:
    """Per-fold metrics plus unweighted mean/sd across folds and the pooled confusion matrix."""
    folds: List[FoldResult]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.metrics.accuracy for f in self.folds])

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def sd_accuracy(self) -> float:
        return float(self.accuracies.std())

    @property
    def mean_macro_f1(self) -> float:
        return float(np.mean([f.metrics.macro_f1 for f in self.folds]))

    @property
    def pooled(self) -> Metrics:
        return Metrics.pooled([f.metrics for f in self.folds])

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"fold": f.fold, "seed": f.seed, "n_test": f.metrics.n_samples,
             "accuracy": f.metrics.accuracy, "macro_f1": f.metrics.macro_f1,
             "weighted_f1": f.metrics.weighted_f1, "final_total_loss": f.final_loss.get("total", float("nan"))}
            for f in self.folds
        ]


def fold_seed(seed: int, fold: int) -> int:
    """Independent training seed for fold ``fold`` of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, 10, fold]).generate_state(1)[0])


def _run_fold(task: Tuple) -> FoldResult:
    fold, dataset, train_idx, test_idx, train_config, model_config, bank, match, checkpoint_dir = task
    config = replace(train_config, seed=fold_seed(train_config.seed, fold))
    fold_dir = Path(checkpoint_dir) / f"fold_{fold:02d}" if checkpoint_dir is not None else None
    model, log = run_training(dataset, train_idx, config, model_config, bank, checkpoint_dir=fold_dir)
    metrics = evaluate_fold(model, dataset, test_idx, bank, match)
    logger.info(f"Fold {fold}: accuracy {metrics.accuracy:.4f}, macro F1 {metrics.macro_f1:.4f} "
                f"({metrics.n_samples} test samples)")
    return FoldResult(
        fold=fold,
        seed=config.seed,
        metrics=metrics,
        test_subjects=sorted(int(s) for s in np.unique(dataset.subject_ids[test_idx])),
        final_loss=log[-1] if log else {},
    )


def run_cross_validation(dataset: MultiviewDataset, k: int, train_config: TrainConfig,
                         model_config: ModelConfig, bank: PromptBank, match: str = "centroid",
                         jobs: int = 1,
                         checkpoint_dir: Optional[Union[str, Path]] = None) -> CrossValidationResult:
    """
    Subject-independent k-fold cross-validation, training from scratch per fold.

    Folds come from ``kfold_subject_split`` seeded with ``train_config.seed``;
    each fold trains with its own derived seed. With ``jobs > 1`` folds run in a
    process pool and are collected in fold order, so results match ``jobs=1``.
    """
    splits = kfold_subject_split(dataset, k, seed=train_config.seed)
    tasks = [
        (i, dataset, train_idx, test_idx, train_config, model_config, bank, match, checkpoint_dir)
        for i, (train_idx, test_idx) in enumerate(splits)
    ]
    logger.info(f"Cross-validation: {k} folds, {len(dataset)} samples, jobs={jobs}")
    if jobs > 1:
        with mp.Pool(min(jobs, k)) as pool:
            results = pool.map(_run_fold, tasks)
    else:
        results = [_run_fold(task) for task in tasks]
    result = CrossValidationResult(folds=list(results))
    logger.info(f"Cross-validation done: accuracy {result.mean_accuracy:.4f} ± {result.sd_accuracy:.4f}")
    return result


# ----------------------------------------------------------------------
# cross-domain
# ----------------------------------------------------------------------

def shifted_data_config(base: SyntheticConfig, shift: DomainShiftConfig) -> SyntheticConfig:
    """Target-domain generator: same class anchors, different view maps, subjects and noise."""
    shift.validate()
    return replace(
        base,
        seed=base.seed + shift.subject_seed_offset,
        anchor_seed=base.anchor_seed if base.anchor_seed is not None else base.seed,
        view_seed=shift.view_seed,
        noise_sd=shift.noise_sd,
    )


def make_shifted_dataset(base: SyntheticConfig, shift: DomainShiftConfig,
                         bank: Optional[PromptBank] = None) -> MultiviewDataset:
    return generate_synthetic(shifted_data_config(base, shift), bank)


@dataclass
class CrossDomainResult:
    metrics: Metrics
    in_domain: Metrics
    class_subset: List[int]
    degenerate: bool


def _subset_metrics(model: MultiviewModel, dataset: MultiviewDataset, bank: PromptBank,
                    class_subset: List[int], match: str) -> Metrics:
    mask = np.isin(dataset.class_ids, class_subset)
    indices = np.flatnonzero(mask)
    if indices.size == 0:
        raise EmptyInputError(f"no samples of classes {class_subset} in the evaluation domain")
    views = dataset.views[indices].transpose(1, 0, 2)
    predicted, _ = zero_shot_predict(views, model, bank, match, classes=class_subset)
    position = {c: i for i, c in enumerate(class_subset)}
    return Metrics.from_predictions(
        [position[int(c)] for c in dataset.class_ids[indices]],
        [position[int(c)] for c in predicted],
        len(class_subset),
        [bank.class_names[c] for c in class_subset],
    )


def run_cross_domain(train_dataset: MultiviewDataset, test_dataset: MultiviewDataset,
                     class_subset: Sequence[int], train_config: TrainConfig, model_config: ModelConfig,
                     bank: PromptBank, match: str = "centroid") -> CrossDomainResult:
    """
    Train on every sample of the source domain, then zero-shot classify the
    target domain among ``class_subset`` only.

    ``in_domain`` scores the same model on the source domain with the same
    class restriction. A single-class subset is flagged as degenerate.
    """
    class_subset = [int(c) for c in class_subset]
    if not class_subset:
        raise ConfigurationError("cross-domain class subset is empty")
    if len(set(class_subset)) != len(class_subset):
        raise ConfigurationError(f"cross-domain class subset has duplicates: {class_subset}")
    for c in class_subset:
        if not 0 <= c < bank.n_classes:
            raise UnknownClassError(f"class id {c} not in prompt bank '{bank.mode}'")
    degenerate = len(class_subset) == 1
    if degenerate:
        logger.warning("cross-domain class subset has a single class; accuracy is trivially 1")

    model, _ = run_training(train_dataset, np.arange(len(train_dataset)), train_config, model_config, bank)
    metrics = _subset_metrics(model, test_dataset, bank, class_subset, match)
    in_domain = _subset_metrics(model, train_dataset, bank, class_subset, match)
    logger.info(f"Cross-domain accuracy {metrics.accuracy:.4f} (in-domain {in_domain.accuracy:.4f}) "
                f"on classes {[bank.class_names[c] for c in class_subset]}")
    return CrossDomainResult(metrics, in_domain, class_subset, degenerate)


# ----------------------------------------------------------------------
# ablation
# ----------------------------------------------------------------------

@dataclass
class AblationResult:
    """Mean CV accuracy per variant; ``runs`` keeps the full cross-validation results."""
    accuracies: Dict[str, float]
    runs: Dict[str, CrossValidationResult] = field(default_factory=dict)

    @property
    def variants(self) -> List[str]:
        return [v for v in VARIANTS if v in self.accuracies]

    def improvement_matrix(self) -> np.ndarray:
        """M[u][v] = acc(u) - acc(v) in VARIANTS order."""
        acc = np.array([self.accuracies[v] for v in self.variants])
        return acc[:, None] - acc[None, :]

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"variant": v, "mean_accuracy": self.accuracies[v],
             "sd_accuracy": self.runs[v].sd_accuracy if v in self.runs else float("nan"),
             "mean_macro_f1": self.runs[v].mean_macro_f1 if v in self.runs else float("nan")}
            for v in self.variants
        ]


def variant_config(train_config: TrainConfig, variant: str) -> TrainConfig:
    """The training config of an ablation variant (one loss weight zeroed)."""
    if variant == "full":
        return train_config
    if variant not in _VARIANT_WEIGHT:
        raise ConfigurationError(f"unknown ablation variant '{variant}'")
    loss = replace(train_config.loss, **{_VARIANT_WEIGHT[variant]: 0.0})
    return replace(train_config, loss=loss)


def run_ablation(dataset: MultiviewDataset, k: int, train_config: TrainConfig, model_config: ModelConfig,
                 bank: PromptBank, match: str = "centroid", jobs: int = 1) -> AblationResult:
    """Cross-validate the full objective and each single-component removal."""
    effective = train_config.effective_loss()
    for component, weight in (("mv_bt", effective.alpha), ("vl_align", effective.beta), ("red_min", effective.gamma)):
        if weight <= 0:
            raise ConfigurationError(f"ablation needs every component enabled in the full reference; '{component}' is off")

    runs = {}
    for variant in VARIANTS:
        logger.info(f"Ablation variant '{variant}'")
        runs[variant] = run_cross_validation(dataset, k, variant_config(train_config, variant),
                                             model_config, bank, match, jobs)
    return AblationResult({v: r.mean_accuracy for v, r in runs.items()}, runs)
