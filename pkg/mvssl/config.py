"""Run configuration: one YAML/JSON file mapped onto a tree of dataclasses.

    seed: 0
    data:    {n_subjects: 20, samples_per_subject: 10, ...}   # SyntheticConfig
    prompts: {mode: basic-six}
    model:   {hidden: 64, embed_dim: 5, ...}                   # ModelConfig
    train:   {epochs: 200, batch_size: 200, loss: {...}, augment: {...}}
    eval:    {folds: 10, match: centroid, class_subset: [0, 1]}
    domain_shift: {view_seed: 1000, ...}

Unknown keys anywhere in the tree are rejected. The top-level ``seed`` is
propagated into ``data.seed`` and ``train.seed``, which cannot be set on their own.
"""
import copy
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, Iterable, List, Optional, Tuple

import yaml

from mvssl.data import PROMPT_MODES, SyntheticConfig
from mvssl.encoders import ModelConfig
from mvssl.errors import ConfigurationError
from mvssl.evaluation import DomainShiftConfig, EvalConfig
from mvssl.train import TrainConfig
from utils.file_loader import load_structured_file, resolve_data_path
from utils.logger import setup_logger

logger = setup_logger(__name__)

DEFAULT_CONFIG = "default.yaml"
SEED_KEYS = ("data.seed", "train.seed")


@dataclass
class PromptConfig:
    """Which prompt bank to use: a shipped mode name or a path to a JSON bank."""
    mode: str = "basic-six"

    def validate(self) -> None:
        if not self.mode:
            raise ConfigurationError("prompts.mode must not be empty")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunConfig:
    seed: int = 0
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    domain_shift: DomainShiftConfig = field(default_factory=DomainShiftConfig)

    def validate(self) -> None:
        for section in (self.data, self.prompts, self.model, self.train, self.eval, self.domain_shift):
            section.validate()
        if self.prompts.mode in PROMPT_MODES:
            expected = 6 if self.prompts.mode == "basic-six" else 5
            if self.data.n_classes != expected:
                raise ConfigurationError(
                    f"data.n_classes={self.data.n_classes} but prompt mode '{self.prompts.mode}' has {expected} classes"
                )
        for c in self.eval.class_subset:
            if not 0 <= c < self.data.n_classes:
                raise ConfigurationError(f"eval.class_subset entry {c} outside 0..{self.data.n_classes - 1}")

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with ``seed`` propagated to the generator and the trainer."""
        return replace(
            self,
            seed=seed,
            data=replace(self.data, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """
        Build from a (possibly partial) nested mapping; missing keys keep defaults.

        Raises:
            ConfigurationError: ``data.seed`` or ``train.seed`` differs from the top-level seed
        """
        config = _build(cls, data or {}, "")
        for key in SEED_KEYS:
            section, _ = key.split(".")
            nested = (data or {}).get(section, {})
            if isinstance(nested, dict) and "seed" in nested and nested["seed"] != config.seed:
                raise ConfigurationError(
                    f"'{key}' ({nested['seed']}) differs from the top-level seed ({config.seed}); "
                    "set the top-level 'seed' instead"
                )
        return config.with_seed(config.seed)


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)

    if is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigurationError(f"'{key}' must be a mapping, got {type(value).__name__}")
        return _build(hint, value, key + ".")
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"'{key}' must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"'{key}' must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigurationError(f"'{key}' must be a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"'{key}' must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"'{key}' must be a string, got {value!r}")
        return value
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"'{key}' must be a list, got {value!r}")
        return [_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            raise ConfigurationError(f"'{key}' must be a mapping, got {value!r}")
        return {str(k): _coerce(v, args[1], f"{key}.{k}") for k, v in value.items()} if args else dict(value)
    return value


def _build(cls: type, data: Dict[str, Any], prefix: str) -> Any:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {name: _coerce(value, hints[name], prefix + name) for name, value in data.items()}
    return cls(**kwargs)


def parse_override(text: str) -> Tuple[str, Any]:
    """Split ``dotted.key=value``; the value is parsed as YAML (numbers, booleans, lists)."""
    if "=" not in text:
        raise ConfigurationError(f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"override '{text}' has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse value of override '{text}': {e}") from e
    return key, value


def apply_overrides(raw: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Return a copy of ``raw`` with every ``dotted.key=value`` applied."""
    result = copy.deepcopy(raw)
    for text in overrides:
        key, value = parse_override(text)
        node = result
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"override '{key}': '{part}' is not a section")
            node = child
        node[parts[-1]] = value
    return result


def load_run_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                    seed: Optional[int] = None) -> RunConfig:
    """
    Load, override, seed and validate a run configuration.

    Args:
        path: YAML/JSON file (resolved against data/configs/); None uses default.yaml
        overrides: ``dotted.key=value`` strings applied after the file
        seed: replaces the file's top-level seed when given

    Raises:
        ConfigurationError: unknown keys, wrong types or invalid values, or an
            override of ``data.seed`` / ``train.seed``
        FileNotFoundError: config file missing
    """
    overrides = list(overrides)
    keys = [parse_override(text)[0] for text in overrides]
    for key in keys:
        if key in SEED_KEYS:
            raise ConfigurationError(f"cannot override '{key}'; the top-level 'seed' (or --seed) sets it")
    resolved = resolve_data_path(path or DEFAULT_CONFIG, subdir="configs")
    raw = load_structured_file(resolved) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {resolved} must contain a mapping")
    if "seed" in keys:
        for key in SEED_KEYS:
            section, _ = key.split(".")
            if isinstance(raw.get(section), dict):
                raw[section].pop("seed", None)
    raw = apply_overrides(raw, overrides)
    config = RunConfig.from_dict(raw)
    if seed is not None:
        config = config.with_seed(seed)
    config.validate()
    logger.debug(f"Loaded run config {resolved} (seed {config.seed}, {len(overrides)} override(s))")
    return config


def config_key_docs(config: Optional[RunConfig] = None) -> List[Tuple[str, Any]]:
    """Every dotted config key with its current value, in declaration order."""
    rows: List[Tuple[str, Any]] = []

    def _walk(obj: Any, prefix: str) -> None:
        for f in fields(obj):
            value = getattr(obj, f.name)
            if is_dataclass(value):
                _walk(value, prefix + f.name + ".")
            else:
                rows.append((prefix + f.name, value))

    _walk(config or RunConfig(), "")
    return rows
