"""Deterministic mini-batch training: data → encoders → losses → Adam.

All randomness of a run flows from ``TrainConfig.seed``: the epoch shuffle
uses the stream (seed, epoch) and each batch's prompt draws and distortions use
(seed, epoch, batch index). Batches can therefore be rebuilt in any order, and
a run resumed from a checkpoint replays exactly the batches it would have seen.
"""
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from mvssl.data import AugmentPolicy, MultiviewDataset, PromptBank, ViewBatch, augment_pair, make_batch
from mvssl.encoders import ModelConfig, MultiviewModel, load_checkpoint, save_checkpoint
from mvssl.errors import BatchTooSmallError, ConfigurationError, DivergenceError, NumericError
from mvssl.losses import (
    COMPONENTS,
    CorrelationMatrix,
    LossBreakdown,
    LossConfig,
    average_correlation,
    cross_correlation,
    joint_loss,
    mv_bt_loss,
    red_min_loss,
    vl_align_loss,
)
from mvssl.tensor_core import Tape, Tensor, backward, finite_difference_check, no_tape
from utils.logger import setup_logger

logger = setup_logger(__name__)

METRIC_COLUMNS = (
    "epoch", "step", "mv_bt", "vl_align", "red_min", "total",
    "cbar_diag_mean", "cbar_offdiag_mean", "fusion_entropy",
)
LR_SCHEDULES = ("constant", "cosine")
DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    """Training hyperparameters; embeds the loss and augmentation settings."""
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    checkpoint_every: int = 0
    components: Dict[str, bool] = field(default_factory=lambda: {name: True for name in COMPONENTS})
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigurationError(f"train.batch_size must be >= 2, got {self.batch_size}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigurationError("train.learning_rate and train.weight_decay must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"train.lr_schedule must be one of {LR_SCHEDULES}")
        unknown = set(self.components) - set(COMPONENTS)
        if unknown:
            raise ConfigurationError(f"unknown loss components in train.components: {sorted(unknown)}")
        self.loss.validate()
        self.augment.validate()

    def effective_loss(self) -> LossConfig:
        """Loss config with toggled-off components weighted 0."""
        weights = {
            "alpha": self.loss.alpha if self.components.get("mv_bt", True) else 0.0,
            "beta": self.loss.beta if self.components.get("vl_align", True) else 0.0,
            "gamma": self.loss.gamma if self.components.get("red_min", True) else 0.0,
        }
        return LossConfig(**{**self.loss.to_dict(), **weights})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name; frozen parameters never appear."""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with decoupled weight decay (applied to the parameters, not the gradient)."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = 1e-4, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names) or None in names:
            raise ConfigurationError("optimizer parameters need unique names")
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimizerState(
            m={p.name: np.zeros(p.shape) for p in self.params},
            v={p.name: np.zeros(p.shape) for p in self.params},
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, learning_rate: Optional[float] = None) -> None:
        lr = self.learning_rate if learning_rate is None else learning_rate
        self.state.step += 1
        t = self.state.step
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            m = self.beta1 * self.state.m[p.name] + (1.0 - self.beta1) * g
            v = self.beta2 * self.state.v[p.name] + (1.0 - self.beta2) * g * g
            self.state.m[p.name], self.state.v[p.name] = m, v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"adam.m.{k}": v for k, v in self.state.m.items()}
        arrays.update({f"adam.v.{k}": v for k, v in self.state.v.items()})
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step: int) -> None:
        for p in self.params:
            self.state.m[p.name] = np.array(arrays[f"adam.m.{p.name}"], dtype=np.float64)
            self.state.v[p.name] = np.array(arrays[f"adam.v.{p.name}"], dtype=np.float64)
        self.state.step = step


def build_optimizer(model: MultiviewModel, config: TrainConfig) -> Adam:
    return Adam(model.parameters(), config.learning_rate, config.weight_decay,
                config.adam_beta1, config.adam_beta2, config.adam_eps)


def scheduled_learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "cosine" and total_steps > 0:
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return config.learning_rate


# ----------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------

def fusion_entropy(weights: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the per-sample fusion weights."""
    w = np.atleast_2d(weights)
    safe = np.where(w > 0, w, 1.0)
    return float((-(w * np.log(safe)).sum(axis=1)).mean())


def _check_simplex(weights: np.ndarray) -> None:
    w = np.atleast_2d(weights)
    if np.abs(w.sum(axis=1) - 1.0).max() > 1e-12 or (w <= 0).any():
        raise NumericError("fusion weights left the probability simplex")


def _view_correlations(model: MultiviewModel, views_a: np.ndarray, views_b: np.ndarray,
                       standardize: bool) -> CorrelationMatrix:
    mats = [
        cross_correlation(model.visual.encode_view(views_a[i]), model.visual.encode_view(views_b[i]),
                          standardize=standardize, source=f"view:{i}")
        for i in range(views_a.shape[0])
    ]
    return average_correlation(mats)


def forward_losses(batch: ViewBatch, model: MultiviewModel, loss_config: LossConfig,
                   augment: AugmentPolicy, rng: np.random.Generator) -> LossBreakdown:
    """
    One forward pass: distort → encode per view per distortion → averaged
    correlation → component losses → weighted total.

    Components weighted 0 are not computed inside the graph; their logged
    value is 0 and the correlation diagnostics are recomputed off-graph.
    """
    if batch.size < 2:
        raise BatchTooSmallError(f"training batches need B >= 2, got B={batch.size}")
    views_a, views_b = augment_pair(batch.views, augment, rng)

    parts: Dict[str, Tensor] = {}
    cbar: Optional[CorrelationMatrix] = None
    if loss_config.alpha > 0:
        cbar = _view_correlations(model, views_a, views_b, loss_config.standardize)
        parts["mv_bt"] = mv_bt_loss(cbar, loss_config.lambda_mv_bt)

    per_view, fused, weights = model.embed(batch.views)
    text = model.text.encode_batch(batch.prompts)
    if loss_config.beta > 0:
        parts["vl_align"] = vl_align_loss(per_view, fused, text, loss_config.tau, loss_config.symmetric)
    if loss_config.gamma > 0:
        parts["red_min"] = red_min_loss(fused, text, loss_config.lambda_red_min, loss_config.standardize)

    for name, value in parts.items():
        if not math.isfinite(value.item()):
            raise DivergenceError(f"loss component '{name}' is not finite ({value.item()})", component=name)

    breakdown = joint_loss(parts, loss_config)
    total = breakdown.total.item()
    if not math.isfinite(total) or abs(total) > DIVERGENCE_LIMIT:
        worst = max(parts, key=lambda k: abs(parts[k].item())) if parts else "total"
        raise DivergenceError(f"total loss diverged ({total}); largest component '{worst}'", component=worst)

    if cbar is None:
        cbar = _detached_correlation(model, views_a, views_b, loss_config.standardize)
    _check_simplex(weights.data)
    breakdown.diagnostics = {
        "cbar_diag_mean": cbar.diagonal_mean(),
        "cbar_offdiag_mean": cbar.offdiagonal_abs_mean(),
        "fusion_entropy": fusion_entropy(weights.data),
    }
    return breakdown


def _detached_correlation(model: MultiviewModel, views_a: np.ndarray, views_b: np.ndarray,
                          standardize: bool) -> CorrelationMatrix:
    with no_tape():
        return _view_correlations(model, views_a, views_b, standardize)


def train_step(batch: ViewBatch, model: MultiviewModel, config: TrainConfig, optimizer: Adam,
               rng: np.random.Generator, learning_rate: Optional[float] = None) -> LossBreakdown:
    """
    Forward, backward and one Adam update.

    Returns:
        The pre-update loss breakdown with diagnostics

    Raises:
        DivergenceError: a component or the total is non-finite or exploding
    """
    optimizer.zero_grad()
    with Tape():
        breakdown = forward_losses(batch, model, config.effective_loss(), config.augment, rng)
        if breakdown.total.node_id is not None:
            backward(breakdown.total)
    optimizer.step(learning_rate)
    logger.debug(f"step {optimizer.state.step}: total={breakdown.total.item():.6f}")
    return breakdown


# ----------------------------------------------------------------------
# epochs and runs
# ----------------------------------------------------------------------

def epoch_batches(train_indices: np.ndarray, batch_size: int, seed: int,
                  epoch: int) -> Iterator[Tuple[int, np.ndarray]]:
    """Seeded shuffle of the training split cut into batches; a last batch below 2 is dropped."""
    order = np.random.default_rng([seed, 8, epoch]).permutation(train_indices)
    for b, start in enumerate(range(0, len(order), batch_size)):
        chunk = order[start:start + batch_size]
        if len(chunk) >= 2:
            yield b, chunk


def batch_rng(seed: int, epoch: int, batch_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 9, epoch, batch_index])


def _mean_row(epoch: int, step: int, breakdowns: List[LossBreakdown]) -> Dict[str, float]:
    rows = [b.to_dict() for b in breakdowns]
    summary = {"epoch": epoch, "step": step}
    for column in METRIC_COLUMNS[2:]:
        summary[column] = float(np.mean([r[column] for r in rows])) if rows else float("nan")
    return summary


def measure_epoch(dataset: MultiviewDataset, train_indices: np.ndarray, model: MultiviewModel,
                  config: TrainConfig, bank: PromptBank, epoch: int = 1) -> Dict[str, float]:
    """Loss and diagnostics over an epoch's batches without updating the model."""
    breakdowns = []
    for b, chunk in epoch_batches(train_indices, config.batch_size, config.seed, epoch):
        rng = batch_rng(config.seed, epoch, b)
        batch = make_batch(dataset, chunk, bank, rng)
        breakdowns.append(forward_losses(batch, model, config.effective_loss(), config.augment, rng))
    return _mean_row(0, 0, breakdowns)


def _write_checkpoint(directory: Path, label: str, model: MultiviewModel, optimizer: Adam,
                      epoch: int, log: List[Dict[str, float]]) -> Path:
    extra = {"epoch": epoch, "step": optimizer.state.step, "metrics": log}
    return save_checkpoint(model, directory / label, extra=extra, arrays=optimizer.state_arrays())


def run_training(dataset: MultiviewDataset, train_indices: Sequence[int], config: TrainConfig,
                 model_config: ModelConfig, bank: PromptBank,
                 checkpoint_dir: Optional[Union[str, Path]] = None,
                 resume_from: Optional[Union[str, Path]] = None) -> Tuple[MultiviewModel, List[Dict[str, float]]]:
    """
    Train a fresh (or resumed) model on the given training split.

    Args:
        dataset: full dataset; only ``train_indices`` are read
        train_indices: sample indices of the training split
        config: training configuration
        model_config: architecture
        bank: prompt bank supplying per-sample prompts
        checkpoint_dir: where to write ``epoch_XXXX`` / ``final`` checkpoints
        resume_from: checkpoint path (without suffix) written by an earlier run

    Returns:
        (model, metrics log rows with METRIC_COLUMNS); the log starts with an
        epoch-0 row measured before any update when epochs >= 1
    """
    config.validate()
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if len(train_indices) < 2:
        raise BatchTooSmallError(f"training split needs at least 2 samples, got {len(train_indices)}")

    model = MultiviewModel(model_config, dataset.input_dim, bank.vocab_size, seed=config.seed)
    optimizer = build_optimizer(model, config)
    log: List[Dict[str, float]] = []
    start_epoch = 1

    if resume_from is not None:
        restored, manifest, arrays = load_checkpoint(resume_from)
        model.load_state_dict(restored.state_dict())
        optimizer.load_state_arrays(arrays, manifest["extra"]["step"])
        log = list(manifest["extra"].get("metrics", []))
        start_epoch = int(manifest["extra"]["epoch"]) + 1
        logger.info(f"Resumed from {resume_from} at epoch {start_epoch - 1}, step {optimizer.state.step}")
    elif config.epochs >= 1:
        log.append(measure_epoch(dataset, train_indices, model, config, bank, epoch=1))

    checkpoint_path = Path(checkpoint_dir) if checkpoint_dir is not None else None
    steps_per_epoch = sum(1 for _ in epoch_batches(train_indices, config.batch_size, config.seed, 1))
    total_steps = steps_per_epoch * config.epochs

    for epoch in range(start_epoch, config.epochs + 1):
        breakdowns = []
        for b, chunk in epoch_batches(train_indices, config.batch_size, config.seed, epoch):
            rng = batch_rng(config.seed, epoch, b)
            batch = make_batch(dataset, chunk, bank, rng)
            lr = scheduled_learning_rate(config, optimizer.state.step, total_steps)
            try:
                breakdowns.append(train_step(batch, model, config, optimizer, rng, learning_rate=lr))
            except DivergenceError as e:
                logger.error(f"Divergence at epoch {epoch}, batch {b}: {e}")
                raise
        row = _mean_row(epoch, optimizer.state.step, breakdowns)
        log.append(row)
        logger.info(
            f"epoch {epoch}/{config.epochs}: total={row['total']:.5f} mv_bt={row['mv_bt']:.5f} "
            f"vl_align={row['vl_align']:.5f} red_min={row['red_min']:.5f} "
            f"offdiag={row['cbar_offdiag_mean']:.4f}"
        )
        if checkpoint_path is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            _write_checkpoint(checkpoint_path, f"epoch_{epoch:04d}", model, optimizer, epoch, log)

    if checkpoint_path is not None:
        _write_checkpoint(checkpoint_path, "final", model, optimizer, config.epochs, log)
    return model, log


# ----------------------------------------------------------------------
# gradient checks
# ----------------------------------------------------------------------

GRADCHECK_TOLERANCE = 1e-4


def gradient_check_suite(seed: int = 0, batch: int = 4, views: int = 3, dim: int = 8,
                         h: float = 1e-5) -> List[Dict[str, Any]]:
    """
    Finite-difference check of each loss and of the full model-through-loss path.

    Embeddings for the per-loss checks are random B×d parameters; the
    composite check perturbs every trainable model parameter on a fixed
    distorted batch.

    Returns:
        one row per check: name, parameter count, max relative error, passed
    """
    rng = np.random.default_rng([seed, 11])
    loss_config = LossConfig()

    def _param(name: str, shape: Tuple[int, ...]) -> Tensor:
        return Tensor.parameter(rng.normal(size=shape), name)

    z_a = [_param(f"z_a{i}", (batch, dim)) for i in range(views)]
    z_b = [_param(f"z_b{i}", (batch, dim)) for i in range(views)]
    per_view = [_param(f"view{i}", (batch, dim)) for i in range(views)]
    fused = _param("fused", (batch, dim))
    text = _param("text", (batch, dim))

    def _mv_bt() -> Tensor:
        mats = [cross_correlation(a, b) for a, b in zip(z_a, z_b)]
        return mv_bt_loss(average_correlation(mats), loss_config.lambda_mv_bt)

    def _vl_align() -> Tensor:
        return vl_align_loss(per_view, fused, text, loss_config.tau)

    def _red_min() -> Tensor:
        return red_min_loss(fused, text, loss_config.lambda_red_min)

    def _joint() -> Tensor:
        parts = {"mv_bt": _mv_bt(), "vl_align": _vl_align(), "red_min": _red_min()}
        return joint_loss(parts, loss_config).total

    model = MultiviewModel(ModelConfig(hidden=dim, embed_dim=dim, fusion_hidden=4), input_dim=6,
                           vocab_size=12, seed=seed)
    raw_views = rng.normal(size=(views, batch, 6))
    views_a, views_b = augment_pair(raw_views, AugmentPolicy(), rng)
    prompts = [list(rng.integers(0, 12, size=3)) for _ in range(batch)]

    def _composite() -> Tensor:
        cbar = _view_correlations(model, views_a, views_b, loss_config.standardize)
        view_embeds, fused_embed, _ = model.embed(raw_views)
        text_embed = model.text.encode_batch(prompts)
        parts = {
            "mv_bt": mv_bt_loss(cbar, loss_config.lambda_mv_bt),
            "vl_align": vl_align_loss(view_embeds, fused_embed, text_embed, loss_config.tau),
            "red_min": red_min_loss(fused_embed, text_embed, loss_config.lambda_red_min),
        }
        return joint_loss(parts, loss_config).total

    # a bias shared by every view score cancels in the softmax over views
    model_params = [p for p in model.parameters() if p.name != "fusion.c2"]
    checks = [
        ("mv_bt_loss", _mv_bt, z_a + z_b),
        ("vl_align_loss", _vl_align, per_view + [fused, text]),
        ("red_min_loss", _red_min, [fused, text]),
        ("joint_loss", _joint, z_a + z_b + per_view + [fused, text]),
        ("model_composite", _composite, model_params),
    ]
    rows = []
    for name, fn, params in checks:
        error = finite_difference_check(fn, params, h)
        rows.append({
            "check": name,
            "n_params": int(sum(p.data.size for p in params)),
            "max_rel_error": error,
            "passed": error < GRADCHECK_TOLERANCE,
        })
        logger.info(f"gradcheck {name}: max relative error {error:.3e}")
    return rows
