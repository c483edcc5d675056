"""Synthetic multiview data, augmentations, rank pooling, prompts and folds.

The generator stands in for multiview projections of 3D/4D face scans: every
class is an anchor direction, every subject adds a fixed offset, and each of
the N views (-30°, 0°, +30° by default) applies its own fixed near-orthogonal
linear map. Datasets persist as ``<name>.manifest.json`` + ``<name>.f64``.
"""
import hashlib
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mvssl.errors import (
    ConfigurationError,
    EmptyInputError,
    UnknownClassError,
    ValidationError,
    VocabularyError,
)
from utils.file_loader import load_structured_file, resolve_data_path, write_json
from utils.logger import setup_logger

logger = setup_logger(__name__)

FORMAT_VERSION = 1
VIEW_ANGLES = (-30.0, 0.0, 30.0)
PROMPT_MODES = {"basic-six": "basic_six.json", "micro-five": "micro_five.json"}
BASIC_SIX = ("happy", "sad", "surprise", "angry", "disgust", "fear")
MICRO_FIVE = ("positive", "negative", "surprise", "repression", "others")
CLASS_PLACEHOLDER = "[CLS]"


# ----------------------------------------------------------------------
# configuration types
# ----------------------------------------------------------------------

@dataclass
class AugmentPolicy:
    """Stochastic feature-space distortion applied to every view."""
    noise_sd: float = 0.1
    dropout: float = 0.1
    scale_low: float = 0.9
    scale_high: float = 1.1

    def validate(self) -> None:
        if self.noise_sd < 0:
            raise ConfigurationError(f"augment.noise_sd must be >= 0, got {self.noise_sd}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"augment.dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 < self.scale_low <= self.scale_high:
            raise ConfigurationError(
                f"augment scale range must satisfy 0 < low <= high, got "
                f"[{self.scale_low}, {self.scale_high}]"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SyntheticConfig:
    """Generator settings; every field is reproduced in the dataset manifest."""
    n_subjects: int = 20
    samples_per_subject: int = 10
    n_classes: int = 6
    input_dim: int = 16
    view_count: int = 3
    noise_sd: float = 0.3
    subject_sd: float = 0.2
    anchor_scale: float = 3.0
    view_mix: float = 0.5
    temporal_frames: int = 8
    dynamic_views: bool = False
    seed: int = 0
    anchor_seed: Optional[int] = None
    view_seed: Optional[int] = None

    def validate(self) -> None:
        for key in ("n_subjects", "samples_per_subject", "n_classes", "input_dim", "view_count"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"data.{key} must be >= 1, got {getattr(self, key)}")
        if self.noise_sd < 0 or self.subject_sd < 0:
            raise ConfigurationError("data.noise_sd and data.subject_sd must be >= 0")
        if self.temporal_frames < 0:
            raise ConfigurationError("data.temporal_frames must be >= 0")
        if self.dynamic_views and self.temporal_frames < 2:
            raise ConfigurationError("data.dynamic_views needs temporal_frames >= 2")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ----------------------------------------------------------------------
# samples and datasets
# ----------------------------------------------------------------------

@dataclass
class Sample:
    """One multiview instance; class_id is never consumed by the training loss."""
    subject_id: int
    class_id: int
    views: np.ndarray
    sequence: Optional[np.ndarray] = None


@dataclass
class ViewBatch:
    """A training batch: views are N×B×input_dim, prompts are token id lists."""
    views: np.ndarray
    subject_ids: np.ndarray
    class_ids: np.ndarray
    prompts: List[List[int]]

    @property
    def size(self) -> int:
        return self.views.shape[1]


@dataclass
class MultiviewDataset:
    """Dense multiview dataset: ``views`` is samples × views × features."""
    views: np.ndarray
    subject_ids: np.ndarray
    class_ids: np.ndarray
    sequences: Optional[np.ndarray] = None
    config: Optional[SyntheticConfig] = None
    oracle_accuracy: Optional[float] = None
    class_names: List[str] = field(default_factory=list)
    view_angles: Tuple[float, ...] = VIEW_ANGLES

    def __post_init__(self):
        if self.views.ndim != 3:
            raise ValidationError(f"views must be samples×views×features, got shape {self.views.shape}")
        count = self.views.shape[0]
        if len(self.subject_ids) != count or len(self.class_ids) != count:
            raise ValidationError("subject_ids and class_ids must have one entry per sample")

    def __len__(self) -> int:
        return self.views.shape[0]

    @property
    def view_count(self) -> int:
        return self.views.shape[1]

    @property
    def input_dim(self) -> int:
        return self.views.shape[2]

    @property
    def n_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return int(self.class_ids.max()) + 1 if len(self) else 0

    def sample(self, index: int) -> Sample:
        sequence = self.sequences[index] if self.sequences is not None else None
        return Sample(
            subject_id=int(self.subject_ids[index]),
            class_id=int(self.class_ids[index]),
            views=self.views[index],
            sequence=sequence,
        )

    def subset(self, indices: Sequence[int]) -> "MultiviewDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return MultiviewDataset(
            views=self.views[indices],
            subject_ids=self.subject_ids[indices],
            class_ids=self.class_ids[indices],
            sequences=self.sequences[indices] if self.sequences is not None else None,
            config=self.config,
            oracle_accuracy=self.oracle_accuracy,
            class_names=list(self.class_names),
            view_angles=self.view_angles,
        )

    def digest(self) -> str:
        """SHA-256 over every float and id in the dataset."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.views, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.subject_ids, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.class_ids, dtype="<i8").tobytes())
        if self.sequences is not None:
            h.update(np.ascontiguousarray(self.sequences, dtype="<f8").tobytes())
        return h.hexdigest()


def _view_transforms(config: SyntheticConfig) -> np.ndarray:
    seed = config.view_seed if config.view_seed is not None else config.seed
    rng = np.random.default_rng([seed, 2])
    dim = config.input_dim
    transforms = []
    for _ in range(config.view_count):
        q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
        q = q * np.sign(np.diag(r))
        transforms.append(config.view_mix * q + (1.0 - config.view_mix) * np.eye(dim))
    return np.stack(transforms)


def _class_anchors(config: SyntheticConfig) -> np.ndarray:
    seed = config.anchor_seed if config.anchor_seed is not None else config.seed
    rng = np.random.default_rng([seed, 1])
    anchors = rng.normal(size=(config.n_classes, config.input_dim))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    return anchors * config.anchor_scale


def _onset_sequence(anchor: np.ndarray, offset: np.ndarray, frames: int, noise_sd: float,
                    rng: np.random.Generator) -> np.ndarray:
    ramp = np.arange(1, frames + 1, dtype=np.float64)[:, None] / frames
    return offset[None, :] + ramp * anchor[None, :] + rng.normal(0.0, noise_sd, (frames, anchor.size))


def _nearest_anchor_accuracy(views: np.ndarray, class_ids: np.ndarray, anchors: np.ndarray,
                             transforms: np.ndarray, by_cosine: bool) -> float:
    correct = 0
    total = 0
    for v in range(views.shape[1]):
        targets = anchors @ transforms[v]
        x = views[:, v, :]
        if by_cosine:
            xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
            tn = targets / np.linalg.norm(targets, axis=1, keepdims=True)
            predicted = np.argmax(xn @ tn.T, axis=1)
        else:
            dist = ((x[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
            predicted = np.argmin(dist, axis=1)
        correct += int((predicted == class_ids).sum())
        total += len(class_ids)
    return correct / total if total else 0.0


def generate_synthetic(config: SyntheticConfig, bank: Optional["PromptBank"] = None) -> MultiviewDataset:
    """
    Generate a seeded multiview dataset.

    Each subject draws from its own derived rng stream, so subjects could be
    generated in parallel without changing the result.

    Args:
        config: generator settings
        bank: prompt bank whose class count must match ``config.n_classes``

    Returns:
        MultiviewDataset with the nearest-anchor oracle accuracy recorded
    """
    config.validate()
    if bank is not None and bank.n_classes != config.n_classes:
        raise ConfigurationError(
            f"data.n_classes={config.n_classes} does not match prompt mode "
            f"'{bank.mode}' with {bank.n_classes} classes"
        )

    anchors = _class_anchors(config)
    transforms = _view_transforms(config)
    dim, frames = config.input_dim, config.temporal_frames

    views, subject_ids, class_ids, sequences = [], [], [], []
    for subject in range(config.n_subjects):
        rng = np.random.default_rng([config.seed, 3, subject])
        offset = rng.normal(0.0, config.subject_sd, dim)
        for j in range(config.samples_per_subject):
            class_id = (j + subject) % config.n_classes
            anchor = anchors[class_id]
            sequence = None
            if frames > 0:
                sequence = _onset_sequence(anchor, offset, frames, config.noise_sd, rng)
            if config.dynamic_views:
                per_view = [
                    rank_pool(_onset_sequence(anchor, offset, frames, config.noise_sd, rng)) @ transforms[v]
                    for v in range(config.view_count)
                ]
            else:
                per_view = [
                    (anchor + offset + rng.normal(0.0, config.noise_sd, dim)) @ transforms[v]
                    for v in range(config.view_count)
                ]
            views.append(np.stack(per_view))
            subject_ids.append(subject)
            class_ids.append(class_id)
            if sequence is not None:
                sequences.append(sequence)

    views_arr = np.stack(views)
    class_arr = np.asarray(class_ids, dtype=np.int64)
    oracle = _nearest_anchor_accuracy(views_arr, class_arr, anchors, transforms, config.dynamic_views)
    angles = VIEW_ANGLES if config.view_count == len(VIEW_ANGLES) else tuple(
        float(a) for a in np.linspace(-30.0, 30.0, config.view_count)
    )
    dataset = MultiviewDataset(
        views=views_arr,
        subject_ids=np.asarray(subject_ids, dtype=np.int64),
        class_ids=class_arr,
        sequences=np.stack(sequences) if sequences else None,
        config=config,
        oracle_accuracy=oracle,
        class_names=list(bank.class_names) if bank is not None else [],
        view_angles=angles,
    )
    logger.info(
        f"Generated {len(dataset)} samples ({config.n_subjects} subjects, "
        f"{config.view_count} views, oracle accuracy {oracle:.3f})"
    )
    return dataset


# ----------------------------------------------------------------------
# dataset files
# ----------------------------------------------------------------------

def save_dataset(dataset: MultiviewDataset, directory: Union[str, Path], name: str,
                 bank: Optional["PromptBank"] = None) -> Path:
    """Write ``<name>.manifest.json`` and ``<name>.f64``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob_path = directory / f"{name}.f64"
    frames = dataset.sequences.shape[1] if dataset.sequences is not None else 0

    with open(blob_path, "wb") as f:
        f.write(np.ascontiguousarray(dataset.views, dtype="<f8").tobytes())
        if dataset.sequences is not None:
            f.write(np.ascontiguousarray(dataset.sequences, dtype="<f8").tobytes())

    manifest = {
        "format_version": FORMAT_VERSION,
        "blob": blob_path.name,
        "dtype": "float64",
        "byte_order": "little",
        "layout": "views[sample][view][feature] then sequences[sample][frame][feature]",
        "n_samples": len(dataset),
        "view_count": dataset.view_count,
        "input_dim": dataset.input_dim,
        "temporal_frames": frames,
        "view_angles": list(dataset.view_angles),
        "subject_ids": dataset.subject_ids.tolist(),
        "class_ids": dataset.class_ids.tolist(),
        "class_names": list(dataset.class_names),
        "config": dataset.config.to_dict() if dataset.config is not None else None,
        "seed": dataset.config.seed if dataset.config is not None else None,
        "oracle_accuracy": dataset.oracle_accuracy,
        "prompts": bank.to_dict() if bank is not None else None,
        "digest": dataset.digest(),
    }
    manifest_path = directory / f"{name}.manifest.json"
    write_json(manifest_path, manifest)
    logger.info(f"Dataset written: {manifest_path} ({blob_path.stat().st_size} bytes of float64)")
    return manifest_path


def load_dataset(manifest_path: Union[str, Path]) -> MultiviewDataset:
    """
    Load a dataset written by save_dataset or produced externally in the same format.

    Raises:
        FileNotFoundError: manifest or blob missing
        ValidationError: blob size disagrees with the manifest
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.name.endswith(".manifest.json"):
        manifest_path = manifest_path.with_name(manifest_path.name + ".manifest.json")
    manifest = load_structured_file(str(manifest_path))
    blob_path = manifest_path.parent / manifest["blob"]
    if not blob_path.exists():
        raise FileNotFoundError(f"Dataset blob not found: {blob_path}")

    count, nviews, dim = manifest["n_samples"], manifest["view_count"], manifest["input_dim"]
    frames = manifest.get("temporal_frames", 0) or 0
    raw = np.frombuffer(blob_path.read_bytes(), dtype="<f8")
    expected = count * nviews * dim + count * frames * dim
    if raw.size != expected:
        raise ValidationError(f"{blob_path} holds {raw.size} floats, manifest implies {expected}")

    split = count * nviews * dim
    views = raw[:split].reshape(count, nviews, dim).astype(np.float64)
    sequences = raw[split:].reshape(count, frames, dim).astype(np.float64) if frames else None
    config = SyntheticConfig(**manifest["config"]) if manifest.get("config") else None
    dataset = MultiviewDataset(
        views=views,
        subject_ids=np.asarray(manifest["subject_ids"], dtype=np.int64),
        class_ids=np.asarray(manifest["class_ids"], dtype=np.int64),
        sequences=sequences,
        config=config,
        oracle_accuracy=manifest.get("oracle_accuracy"),
        class_names=list(manifest.get("class_names") or []),
        view_angles=tuple(manifest.get("view_angles") or VIEW_ANGLES[:nviews]),
    )
    recorded = manifest.get("digest")
    if recorded and recorded != dataset.digest():
        logger.warning(f"Dataset digest mismatch for {manifest_path}: manifest {recorded[:12]}...")
    logger.info(f"Loaded dataset {manifest_path.name}: {count} samples, {nviews} views")
    return dataset


# ----------------------------------------------------------------------
# augmentation and temporal pooling
# ----------------------------------------------------------------------

def augment_pair(sample: Union[Sample, np.ndarray], policy: AugmentPolicy,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Two independent stochastic distortions of every view; the input is not modified."""
    views = sample.views if isinstance(sample, Sample) else np.asarray(sample, dtype=np.float64)

    def _distort() -> np.ndarray:
        scale = rng.uniform(policy.scale_low, policy.scale_high, size=views.shape[:-1] + (1,))
        keep = rng.random(views.shape) >= policy.dropout
        noise = rng.normal(0.0, policy.noise_sd, views.shape)
        return views * scale * keep + noise

    return _distort(), _distort()


def rank_pool_weights(frames: int) -> np.ndarray:
    """Approximate rank pooling weights 2t - T - 1 for t = 1..T."""
    t = np.arange(1, frames + 1, dtype=np.float64)
    return 2.0 * t - frames - 1.0


def rank_pool(sequence: np.ndarray) -> np.ndarray:
    """Collapse a T×input_dim sequence into one max-abs normalized dynamic vector."""
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.ndim != 2 or sequence.shape[0] == 0:
        raise EmptyInputError(f"rank_pool needs a non-empty T×input_dim sequence, got {sequence.shape}")
    # w_t = -w_{T+1-t}: pairing frames first makes static content cancel exactly
    frames = sequence.shape[0]
    half = frames // 2
    late, early = sequence[::-1][:half], sequence[:half]
    pooled = rank_pool_weights(frames)[::-1][:half] @ (late - early)
    peak = np.abs(pooled).max()
    return pooled / peak if peak > 0 else np.zeros_like(pooled)


# ----------------------------------------------------------------------
# prompts
# ----------------------------------------------------------------------

_STRIP = str.maketrans("", "", string.punctuation)


def tokenize_words(text: str) -> List[str]:
    """Whitespace tokenizer: lowercase, punctuation stripped."""
    return text.lower().translate(_STRIP).split()


class PromptBank:
    """Class-indexed prompt templates with a whitespace vocabulary."""

    def __init__(self, mode: str, templates: Dict[str, List[str]]):
        if not templates:
            raise ConfigurationError("prompt bank has no classes")
        self.mode = mode
        self.class_names: List[str] = list(templates)
        self.templates: Dict[int, List[str]] = {
            i: [t.replace(CLASS_PLACEHOLDER, name) for t in templates[name]]
            for i, name in enumerate(self.class_names)
        }
        words = sorted({w for ts in self.templates.values() for t in ts for w in tokenize_words(t)})
        self.vocabulary: Dict[str, int] = {w: i for i, w in enumerate(words)}

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def validate(self) -> None:
        """Check the invariants every shipped bank satisfies."""
        for class_id, ts in self.templates.items():
            if len(ts) < 2:
                raise ConfigurationError(
                    f"class '{self.class_names[class_id]}' needs at least 2 templates, has {len(ts)}"
                )
        if self.mode == "micro-five" and set(self.class_names) != set(MICRO_FIVE):
            raise ConfigurationError(f"micro-five bank must contain exactly {MICRO_FIVE}")
        if self.mode == "basic-six" and set(self.class_names) != set(BASIC_SIX):
            raise ConfigurationError(f"basic-six bank must contain exactly {BASIC_SIX}")

    def templates_for(self, class_id: int) -> List[str]:
        if class_id not in self.templates:
            raise UnknownClassError(f"class id {class_id} not in prompt bank '{self.mode}'")
        return self.templates[class_id]

    def tokenize(self, text: str) -> List[int]:
        ids = []
        for word in tokenize_words(text):
            if word not in self.vocabulary:
                raise VocabularyError(f"word '{word}' is not in the prompt vocabulary")
            ids.append(self.vocabulary[word])
        return ids

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "classes": {name: self.templates[i] for i, name in enumerate(self.class_names)},
        }


def load_prompt_bank(mode_or_path: str = "basic-six") -> PromptBank:
    """
    Load a shipped bank by mode name or any JSON mapping class name → templates.

    Raises:
        ConfigurationError: unknown mode or invariant violation
        FileNotFoundError: bank file missing
    """
    if mode_or_path in PROMPT_MODES:
        mode = mode_or_path
        path = resolve_data_path(PROMPT_MODES[mode], subdir="prompts")
    else:
        path = mode_or_path
        mode = Path(path).stem.replace("_", "-")
        if not Path(path).exists():
            raise ConfigurationError(
                f"unknown prompt mode '{mode_or_path}' (expected one of {sorted(PROMPT_MODES)} or a JSON path)"
            )
    mapping = load_structured_file(path)
    bank = PromptBank(mode, {str(k): list(v) for k, v in mapping.items()})
    bank.validate()
    logger.debug(f"Loaded prompt bank '{mode}': {bank.n_classes} classes, vocab {bank.vocab_size}")
    return bank


def sample_prompt(class_id: int, bank: PromptBank, rng: np.random.Generator) -> List[int]:
    """Uniformly draw one of the class's templates and tokenize it."""
    templates = bank.templates_for(class_id)
    return bank.tokenize(templates[int(rng.integers(len(templates)))])


def make_batch(dataset: MultiviewDataset, indices: Sequence[int], bank: PromptBank,
               rng: np.random.Generator) -> ViewBatch:
    """Assemble a ViewBatch with one sampled prompt per sample."""
    indices = np.asarray(indices, dtype=np.int64)
    class_ids = dataset.class_ids[indices]
    return ViewBatch(
        views=np.ascontiguousarray(dataset.views[indices].transpose(1, 0, 2)),
        subject_ids=dataset.subject_ids[indices],
        class_ids=class_ids,
        prompts=[sample_prompt(int(c), bank, rng) for c in class_ids],
    )


# ----------------------------------------------------------------------
# folds
# ----------------------------------------------------------------------

def kfold_subject_split(dataset: Union[MultiviewDataset, Sequence[int]], k: int,
                        seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Subject-independent k-fold split.

    Distinct subject ids are sorted, permuted with ``seed`` and cut into k
    near-equal groups; fold i tests group i and trains on the rest. Keying on
    the sorted id set makes folds independent of sample order.

    Returns:
        k (train_indices, test_indices) pairs
    """
    subject_ids = dataset.subject_ids if isinstance(dataset, MultiviewDataset) else np.asarray(dataset)
    subjects = np.unique(subject_ids)
    if k < 2 or k > len(subjects):
        raise ConfigurationError(f"k={k} is invalid for {len(subjects)} distinct subjects")

    order = np.random.default_rng([seed, 4]).permutation(subjects)
    folds = []
    for group in np.array_split(order, k):
        in_test = np.isin(subject_ids, group)
        folds.append((np.flatnonzero(~in_test), np.flatnonzero(in_test)))
    return folds
