"""Visual encoder, frozen text encoder, view-aware fusion and checkpoints.

The visual path (encoder + projector, shared by all views and both
distortions) and the fusion scorer are trainable; the text encoder is a
randomly initialized embedding table that stays frozen unless configured
otherwise.
"""
import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mvssl.errors import ConfigurationError, DimensionError, EmptyInputError, VocabularyError
from mvssl.tensor_core import Tensor, as_tensor, concat, l2_normalize, softmax, stack, take_rows
from utils.file_loader import load_structured_file, write_json
from utils.logger import setup_logger

logger = setup_logger(__name__)

CHECKPOINT_VERSION = 1
FUSION_MODES = ("attention", "mean")


@dataclass
class ModelConfig:
    """Architecture settings; the seed comes from the training config."""
    hidden: int = 64
    embed_dim: int = 32
    fusion_hidden: int = 16
    fusion_mode: str = "attention"
    fusion_zero_init: bool = False
    bias: bool = True
    text_frozen: bool = True

    def validate(self) -> None:
        if self.hidden < 1 or self.embed_dim < 1 or self.fusion_hidden < 1:
            raise ConfigurationError("model.hidden, model.embed_dim and model.fusion_hidden must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"model.fusion_mode must be one of {FUSION_MODES}, got '{self.fusion_mode}'")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class VisualEncoder:
    """Two-layer tanh MLP (input_dim → hidden → d) followed by a d → d projector."""

    def __init__(self, input_dim: int, hidden: int, embed_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.input_dim = input_dim
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.bias = bias
        self.w1 = Tensor.parameter(_uniform(rng, input_dim, (input_dim, hidden)), "visual.w1")
        self.w2 = Tensor.parameter(_uniform(rng, hidden, (hidden, embed_dim)), "visual.w2")
        self.wp = Tensor.parameter(_uniform(rng, embed_dim, (embed_dim, embed_dim)), "visual.wp")
        if bias:
            self.b1 = Tensor.parameter(_uniform(rng, input_dim, (hidden,)), "visual.b1")
            self.b2 = Tensor.parameter(_uniform(rng, hidden, (embed_dim,)), "visual.b2")
            self.bp = Tensor.parameter(_uniform(rng, embed_dim, (embed_dim,)), "visual.bp")

    @staticmethod
    def parameter_count(input_dim: int, hidden: int, embed_dim: int, bias: bool = True) -> int:
        weights = input_dim * hidden + hidden * embed_dim + embed_dim * embed_dim
        return weights + (hidden + 2 * embed_dim if bias else 0)

    def parameters(self) -> List[Tensor]:
        params = [self.w1, self.w2, self.wp]
        if self.bias:
            params += [self.b1, self.b2, self.bp]
        return params

    def encode_view(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        """Map view features (input_dim or B×input_dim) to embeddings z′ (d or B×d)."""
        x = as_tensor(x)
        if x.ndim not in (1, 2) or x.shape[-1] != self.input_dim:
            raise ConfigurationError(
                f"view features have shape {x.shape}, encoder expects input_dim={self.input_dim}"
            )
        h = x @ self.w1
        if self.bias:
            h = h + self.b1
        f = h.tanh() @ self.w2
        if self.bias:
            f = f + self.b2
        z = f.tanh() @ self.wp
        if self.bias:
            z = z + self.bp
        return z

    def lipschitz_bound(self) -> float:
        """Product of layer operator norms (tanh is 1-Lipschitz)."""
        return float(np.prod([np.linalg.norm(w.data, 2) for w in (self.w1, self.w2, self.wp)]))


class TextEncoder:
    """Token embedding table with mean pooling and L2-normalized output."""

    def __init__(self, vocab_size: int, embed_dim: int, rng: np.random.Generator, frozen: bool = True):
        if vocab_size < 1:
            raise ConfigurationError("text encoder needs a non-empty vocabulary")
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.frozen = frozen
        self.table = Tensor(_uniform(rng, embed_dim, (vocab_size, embed_dim)),
                            requires_grad=not frozen, name="text.table")

    def parameters(self) -> List[Tensor]:
        return [] if self.frozen else [self.table]

    def encode_text(self, tokens: Sequence[int]) -> Tensor:
        tokens = list(tokens)
        if not tokens:
            raise EmptyInputError("cannot encode an empty prompt")
        for token in tokens:
            if not 0 <= int(token) < self.vocab_size:
                raise VocabularyError(f"token id {token} outside vocabulary of size {self.vocab_size}")
        return l2_normalize(take_rows(self.table, tokens).mean(axis=0))

    def encode_batch(self, prompts: Sequence[Sequence[int]]) -> Tensor:
        if not prompts:
            raise EmptyInputError("cannot encode an empty prompt batch")
        return stack([self.encode_text(p) for p in prompts])


class FusionHead:
    """View-aware fusion: per-view score MLP, softmax over views, convex combination."""

    def __init__(self, embed_dim: int, hidden: int, rng: np.random.Generator,
                 mode: str = "attention", zero_init: bool = False):
        self.mode = mode
        self.u1 = Tensor.parameter(_uniform(rng, embed_dim, (embed_dim, hidden)), "fusion.u1")
        self.c1 = Tensor.parameter(_uniform(rng, embed_dim, (hidden,)), "fusion.c1")
        if zero_init:
            self.u2 = Tensor.parameter(np.zeros((hidden, 1)), "fusion.u2")
            self.c2 = Tensor.parameter(np.zeros(1), "fusion.c2")
        else:
            self.u2 = Tensor.parameter(_uniform(rng, hidden, (hidden, 1)), "fusion.u2")
            self.c2 = Tensor.parameter(_uniform(rng, hidden, (1,)), "fusion.c2")

    def parameters(self) -> List[Tensor]:
        return [self.u1, self.c1, self.u2, self.c2] if self.mode == "attention" else []

    @staticmethod
    def pool(z: Tensor) -> Tensor:
        # global average pooling is the identity for vector embeddings
        return z

    def score(self, z: Tensor) -> Tensor:
        return (self.pool(z) @ self.u1 + self.c1).tanh() @ self.u2 + self.c2

    def fuse_views(self, views: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
        """
        Combine view embeddings into z^mv.

        Args:
            views: N embeddings, each d (one sample) or B×d (a batch)

        Returns:
            (z^mv, weights) with weights of shape N or B×N on the simplex
        """
        if not views:
            raise EmptyInputError("fuse_views needs at least one view embedding")
        views = [as_tensor(v) for v in views]
        shapes = {v.shape for v in views}
        if len(shapes) != 1:
            raise DimensionError("view embeddings must share one shape", *sorted(shapes))
        count = len(views)
        batched = views[0].ndim == 2

        if self.mode == "mean":
            weight_shape = (views[0].shape[0], count) if batched else (count,)
            weights = Tensor(np.full(weight_shape, 1.0 / count))
        else:
            scores = concat([self.score(v) for v in views], axis=1 if batched else 0)
            weights = softmax(scores, axis=-1)

        fused = None
        for i, view in enumerate(views):
            w = weights[:, i:i + 1] if batched else weights[i]
            term = w * view
            fused = term if fused is None else fused + term
        return fused, weights


class MultiviewModel:
    """Shared visual path, frozen text encoder and fusion head."""

    def __init__(self, config: ModelConfig, input_dim: int, vocab_size: int, seed: int = 0):
        config.validate()
        self.config = config
        self.input_dim = input_dim
        self.vocab_size = vocab_size
        self.seed = seed
        self.visual = VisualEncoder(input_dim, config.hidden, config.embed_dim,
                                    np.random.default_rng([seed, 5]), bias=config.bias)
        self.text = TextEncoder(vocab_size, config.embed_dim,
                                np.random.default_rng([seed, 6]), frozen=config.text_frozen)
        self.fusion = FusionHead(config.embed_dim, config.fusion_hidden,
                                 np.random.default_rng([seed, 7]),
                                 mode=config.fusion_mode, zero_init=config.fusion_zero_init)

    def parameters(self) -> List[Tensor]:
        """Trainable parameters in a fixed order; frozen ones are excluded."""
        return self.visual.parameters() + self.fusion.parameters() + self.text.parameters()

    def all_parameters(self) -> List[Tensor]:
        params = self.visual.parameters() + [self.fusion.u1, self.fusion.c1, self.fusion.u2, self.fusion.c2]
        return params + [self.text.table]

    def encode_views(self, views: np.ndarray) -> List[Tensor]:
        """Encode N×B×input_dim (or N×input_dim) view features into N embeddings."""
        return [self.visual.encode_view(views[i]) for i in range(views.shape[0])]

    def embed(self, views: np.ndarray) -> Tuple[List[Tensor], Tensor, Tensor]:
        per_view = self.encode_views(views)
        fused, weights = self.fusion.fuse_views(per_view)
        return per_view, fused, weights

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.all_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for param in self.all_parameters():
            if param.name not in state:
                raise ConfigurationError(f"checkpoint is missing parameter '{param.name}'")
            value = np.asarray(state[param.name], dtype=np.float64)
            if value.shape != param.shape:
                raise DimensionError(f"checkpoint shape mismatch for '{param.name}'", value.shape, param.shape)
            param.data = value.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for param in self.all_parameters():
            h.update(param.name.encode())
            h.update(np.ascontiguousarray(param.data, dtype="<f8").tobytes())
        return h.hexdigest()


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def save_checkpoint(model: MultiviewModel, path: Union[str, Path],
                    extra: Optional[Dict[str, Any]] = None,
                    arrays: Optional[Dict[str, np.ndarray]] = None) -> Path:
    """
    Write ``<path>.json`` (manifest) and ``<path>.f64`` (little-endian float64 blob).

    The blob holds the model parameters followed by any ``arrays`` (optimizer
    state), each flattened row-major; the manifest records name, shape and
    float offset for every entry.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = list(model.state_dict().items()) + sorted((arrays or {}).items())

    index, offset = [], 0
    with open(path.with_suffix(".f64"), "wb") as f:
        for name, value in entries:
            value = np.ascontiguousarray(value, dtype="<f8")
            f.write(value.tobytes())
            index.append({"name": name, "shape": list(value.shape), "offset": offset})
            offset += value.size

    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "blob": path.with_suffix(".f64").name,
        "dtype": "float64",
        "byte_order": "little",
        "model_config": model.config.to_dict(),
        "input_dim": model.input_dim,
        "vocab_size": model.vocab_size,
        "seed": model.seed,
        "digest": model.digest(),
        "entries": index,
        "extra": extra or {},
    }
    write_json(path.with_suffix(".json"), manifest)
    logger.debug(f"Checkpoint written: {path.with_suffix('.json')}")
    return path.with_suffix(".json")


def load_checkpoint(path: Union[str, Path]) -> Tuple[MultiviewModel, Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Rebuild a model from a checkpoint.

    Returns:
        (model, manifest, extra arrays not belonging to the model)
    """
    path = Path(path)
    manifest = load_structured_file(str(path.with_suffix(".json")))
    raw = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype="<f8")

    values = {}
    for entry in manifest["entries"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        values[entry["name"]] = raw[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).astype(np.float64)

    model = MultiviewModel(ModelConfig(**manifest["model_config"]), manifest["input_dim"],
                           manifest["vocab_size"], manifest["seed"])
    model.load_state_dict(values)
    names = {p.name for p in model.all_parameters()}
    leftovers = {k: v for k, v in values.items() if k not in names}
    logger.debug(f"Checkpoint loaded: {path.with_suffix('.json')} ({len(leftovers)} extra arrays)")
    return model, manifest, leftovers
