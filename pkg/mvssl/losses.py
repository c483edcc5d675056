"""The four objective components and their weighted combination.

- multi-view decorrelation: per-view cross-correlation of two distortions,
  averaged over views, pushed toward the identity
- vision-language alignment: InfoNCE of every view embedding and the fused
  embedding against the batch's text embeddings
- cross-modal redundancy minimization: the same identity target applied to
  the fused-visual × text cross-correlation
- joint objective: alpha·mv_bt + beta·vl_align + gamma·red_min

Penalties are sums over dimension pairs, not means.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from mvssl.errors import BatchTooSmallError, ConfigurationError, DimensionError, EmptyInputError, NumericError
from mvssl.tensor_core import Tensor, as_tensor, column_standardize, cosine_matrix, diagonal, log_softmax
from utils.logger import setup_logger

logger = setup_logger(__name__)

COMPONENTS = ("mv_bt", "vl_align", "red_min")


@dataclass
class LossConfig:
    """Scalar hyperparameters of the joint objective."""
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lambda_mv_bt: float = 5e-3
    lambda_red_min: float = 5e-3
    tau: float = 0.07
    standardize: bool = True
    symmetric: bool = False

    def validate(self) -> None:
        for key in ("alpha", "beta", "gamma", "lambda_mv_bt", "lambda_red_min"):
            value = getattr(self, key)
            if not value >= 0:
                raise ConfigurationError(f"loss.{key} must be >= 0, got {value}")
        if not self.tau > 0:
            raise ConfigurationError(f"loss.tau must be > 0, got {self.tau}")

    def weight(self, component: str) -> float:
        return {"mv_bt": self.alpha, "vl_align": self.beta, "red_min": self.gamma}[component]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class CorrelationMatrix:
    """A d×d cross-correlation with a tag naming where it came from."""
    values: Tensor
    source: str

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def diagonal_mean(self) -> float:
        return float(np.diagonal(self.values.data).mean())

    def offdiagonal_abs_mean(self) -> float:
        d = self.dim
        if d < 2:
            return 0.0
        off = self.values.data[~np.eye(d, dtype=bool)]
        return float(np.abs(off).mean())


@dataclass
class LossBreakdown:
    """Per-component values and the weighted total (tensors, so total can be differentiated)."""
    mv_bt: Tensor
    vl_align: Tensor
    red_min: Tensor
    total: Tensor
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def component(self, name: str) -> Tensor:
        return getattr(self, name)

    def to_dict(self) -> Dict[str, float]:
        values = {name: self.component(name).item() for name in COMPONENTS}
        values["total"] = self.total.item()
        values.update(self.diagnostics)
        return values


def _zero() -> Tensor:
    return Tensor(0.0)


def cross_correlation(z_a: Tensor, z_b: Tensor, standardize: bool = True,
                      source: str = "view") -> CorrelationMatrix:
    """
    Batch cross-correlation C = (1/B)·zAᵀ·zB of two B×d embedding sets.

    Both sides are column-standardized first unless ``standardize`` is False
    (raw variant, kept for comparison).
    """
    z_a, z_b = as_tensor(z_a), as_tensor(z_b)
    if z_a.ndim != 2 or z_a.shape != z_b.shape:
        raise DimensionError("cross_correlation needs two B×d matrices of equal shape", z_a.shape, z_b.shape)
    batch = z_a.shape[0]
    if batch < 2:
        raise BatchTooSmallError(f"cross_correlation needs B >= 2, got B={batch}")
    if standardize:
        z_a, z_b = column_standardize(z_a), column_standardize(z_b)
    return CorrelationMatrix((z_a.T @ z_b) / float(batch), source)


def average_correlation(mats: Sequence[CorrelationMatrix]) -> CorrelationMatrix:
    """Entrywise mean of N d×d correlation matrices."""
    if not mats:
        raise EmptyInputError("average_correlation needs at least one matrix")
    shapes = {m.values.shape for m in mats}
    if len(shapes) != 1:
        raise DimensionError("correlation matrices must share one shape", *sorted(shapes))
    total = mats[0].values
    for m in mats[1:]:
        total = total + m.values
    return CorrelationMatrix(total / float(len(mats)), "averaged")


def _identity_penalty(c: Tensor, lam: float) -> Tensor:
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionError("correlation penalty needs a square matrix", c.shape)
    d = c.shape[0]
    on_diag = ((diagonal(c) - 1.0) ** 2).sum()
    off_mask = 1.0 - np.eye(d)
    off_diag = ((c * off_mask) ** 2).sum()
    return on_diag + lam * off_diag


def mv_bt_loss(cbar: CorrelationMatrix, lambda_mv_bt: float) -> Tensor:
    """Σ_k(C̄_kk − 1)² + λ·Σ_{k≠l} C̄_kl²; zero iff C̄ is the identity."""
    values = cbar.values if isinstance(cbar, CorrelationMatrix) else as_tensor(cbar)
    return _identity_penalty(values, lambda_mv_bt)


def red_min_loss(fused: Tensor, text: Tensor, lambda_red_min: float, standardize: bool = True) -> Tensor:
    """Identity penalty on the fused-visual × text cross-correlation."""
    c_vt = cross_correlation(fused, text, standardize=standardize, source="visual-text")
    return _identity_penalty(c_vt.values, lambda_red_min)


def _info_nce_rows(logits: Tensor) -> Tensor:
    """Sum over rows of −log softmax at the diagonal (row i's positive is column i)."""
    return -diagonal(log_softmax(logits, axis=1)).sum()


def vl_align_loss(view_embeds: Sequence[Tensor], fused: Tensor, text: Tensor, tau: float,
                  symmetric: bool = False) -> Tensor:
    """
    Contrastive alignment of every view embedding and the fused embedding to text.

    Each of the N+1 groups scores its B rows against all B text embeddings of
    the batch by cosine/tau; the loss is the sum of −log softmax at the
    matching text, divided by (N+1)·B. With ``symmetric`` the text→visual
    direction is added and the two directions are averaged.
    """
    if not tau > 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")
    text = as_tensor(text)
    groups: List[Tensor] = [as_tensor(v) for v in view_embeds] + [as_tensor(fused)]
    if text.ndim != 2 or text.shape[0] == 0:
        raise EmptyInputError(f"vl_align_loss needs a non-empty B×d text batch, got {text.shape}")
    for g in groups:
        if g.shape != text.shape:
            raise DimensionError("vl_align_loss inputs must share B×d", g.shape, text.shape)

    batch = text.shape[0]
    total = _zero()
    for g in groups:
        logits = cosine_matrix(g, text) / tau
        term = _info_nce_rows(logits)
        if symmetric:
            term = 0.5 * (term + _info_nce_rows(logits.T))
        total = total + term
    return total / float(len(groups) * batch)


def joint_loss(parts: Dict[str, Tensor], config: LossConfig) -> LossBreakdown:
    """
    Weighted combination of the component losses.

    Components with weight 0 (or absent from ``parts``) are left out of the
    total entirely, so they receive no gradient.
    """
    config.validate()
    values = {name: as_tensor(parts.get(name, _zero())) for name in COMPONENTS}
    for name, value in values.items():
        if not math.isfinite(value.item()):
            raise NumericError(f"component '{name}' is not finite: {value.item()}")

    total: Optional[Tensor] = None
    for name in COMPONENTS:
        weight = config.weight(name)
        if weight == 0.0 or name not in parts:
            continue
        term = weight * values[name]
        total = term if total is None else total + term
    return LossBreakdown(
        mv_bt=values["mv_bt"],
        vl_align=values["vl_align"],
        red_min=values["red_min"],
        total=total if total is not None else _zero(),
    )
