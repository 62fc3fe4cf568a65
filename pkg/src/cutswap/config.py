"""Run configuration: one YAML document with a frozen dataclass per section."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from cutswap.augment.cutswap import ANCHOR_STRATEGIES, AugmentConfig
from cutswap.augment.saliency import (
    DEFAULT_INDICES,
    DEFAULT_SIGMA_MAX,
    DEFAULT_SIGMA_MIN,
    DEFAULT_TOTAL_LEVELS,
)
from cutswap.dataset.synthetic import SynthConfig
from cutswap.detection.memorybank import DEFAULT_GRID, DEFAULT_MIN_BANK_SIZE, DEFAULT_SMOOTH_SIGMA
from cutswap.detection.metrics import PIXEL_AUC_MODES
from cutswap.model.encoder import MIN_INPUT_SIZE
from cutswap.model.training import TrainConfig
from cutswap.services.exceptions import ConfigError
from cutswap.utils.seeding import derive_seed

LOGGER = logging.getLogger(__name__)

SALIENCY_SOURCES = ("builtin", "external")
SCORE_SPLITS = ("test", "train")
ABLATION_AXES = ("k", "cluster_choice", "level_combo", "anchor_strategy")
CLUSTER_CHOICES = ("random", "min", "max")
SEEDED_SECTIONS = ("synth", "augment", "train", "bank")


@dataclass(frozen=True)
class DataConfig:
    """Dataset location and working resolution; ``root=None`` uses the synthesized category."""

    root: str | None = None
    image_size: int = 128

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"data.image_size must be >= 8, got {self.image_size}")


@dataclass(frozen=True)
class SaliencyConfig:
    source: str = "builtin"
    directory: str | None = None
    indices: tuple[int, ...] = DEFAULT_INDICES
    total_levels: int = DEFAULT_TOTAL_LEVELS
    sigma_min: float = DEFAULT_SIGMA_MIN
    sigma_max: float = DEFAULT_SIGMA_MAX

    def __post_init__(self) -> None:
        if self.source not in SALIENCY_SOURCES:
            raise ConfigError(f"saliency.source must be one of {SALIENCY_SOURCES}")
        if self.source == "external" and not self.directory:
            raise ConfigError("saliency.directory is required for external saliency maps")
        if self.total_levels < 1:
            raise ConfigError("saliency.total_levels must be >= 1")
        if not self.indices:
            raise ConfigError("saliency.indices must select at least one level")
        if any(i < 1 or i > self.total_levels for i in self.indices):
            raise ConfigError(
                f"saliency.indices {self.indices} must lie in [1, {self.total_levels}]"
            )
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ConfigError(f"saliency.indices must be strictly increasing, got {self.indices}")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ConfigError("saliency sigmas must satisfy 0 < sigma_min <= sigma_max")


@dataclass(frozen=True)
class BankConfig:
    grid: tuple[int, int] = DEFAULT_GRID
    coreset_ratio: float = 0.01
    min_size: int = DEFAULT_MIN_BANK_SIZE
    seed: int | None = None

    def __post_init__(self) -> None:
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError(f"bank.grid must be two positive integers, got {self.grid}")
        if not 0.0 < self.coreset_ratio <= 1.0:
            raise ConfigError(f"bank.coreset_ratio must be in (0, 1], got {self.coreset_ratio}")
        if self.min_size < 1:
            raise ConfigError("bank.min_size must be >= 1")


@dataclass(frozen=True)
class ScoreConfig:
    smooth_sigma: float = DEFAULT_SMOOTH_SIGMA
    split: str = "test"

    def __post_init__(self) -> None:
        if self.smooth_sigma < 0:
            raise ConfigError("score.smooth_sigma must be >= 0")
        if self.split not in SCORE_SPLITS:
            raise ConfigError(f"score.split must be one of {SCORE_SPLITS}")


@dataclass(frozen=True)
class EvalConfig:
    coreset_ratios: tuple[float, ...] = (0.01, 0.001)
    pixel_auc_mode: str = "global"

    def __post_init__(self) -> None:
        if not self.coreset_ratios:
            raise ConfigError("eval.coreset_ratios must list at least one ratio")
        if any(not 0.0 < ratio <= 1.0 for ratio in self.coreset_ratios):
            raise ConfigError(f"eval.coreset_ratios must lie in (0, 1], got {self.coreset_ratios}")
        if self.pixel_auc_mode not in PIXEL_AUC_MODES:
            raise ConfigError(f"eval.pixel_auc_mode must be one of {PIXEL_AUC_MODES}")


@dataclass(frozen=True)
class AblationConfig:
    """Swept values per axis and the seeds every arm is averaged over."""

    k_values: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    cluster_choices: tuple[str, ...] = CLUSTER_CHOICES
    level_combos: tuple[tuple[int, ...], ...] = (
        (4,),
        (16,),
        (30,),
        (4, 16),
        (16, 30),
        (4, 16, 30),
        (4, 9, 16, 23, 30),
    )
    anchor_strategies: tuple[str, ...] = ("kmeans-max", "saliency-sort-topM")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    direction_tolerance: float = 0.02

    def __post_init__(self) -> None:
        if any(k < 1 for k in self.k_values):
            raise ConfigError("ablation.k_values must be >= 1")
        unknown = set(self.cluster_choices) - set(CLUSTER_CHOICES)
        if unknown:
            raise ConfigError(f"ablation.cluster_choices has unknown entries {sorted(unknown)}")
        unknown = set(self.anchor_strategies) - set(ANCHOR_STRATEGIES)
        if unknown:
            raise ConfigError(f"ablation.anchor_strategies has unknown entries {sorted(unknown)}")
        if not self.seeds:
            raise ConfigError("ablation.seeds must list at least one seed")
        if self.direction_tolerance < 0:
            raise ConfigError("ablation.direction_tolerance must be >= 0")

    def arms(self, axis: str) -> tuple[Any, ...]:
        if axis == "k":
            return self.k_values
        if axis == "cluster_choice":
            return self.cluster_choices
        if axis == "level_combo":
            return self.level_combos
        if axis == "anchor_strategy":
            return self.anchor_strategies
        raise ConfigError(f"Unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


SECTION_TYPES: dict[str, type] = {
    "data": DataConfig,
    "synth": SynthConfig,
    "saliency": SaliencyConfig,
    "augment": AugmentConfig,
    "train": TrainConfig,
    "bank": BankConfig,
    "score": ScoreConfig,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}


@dataclass(frozen=True)
class RunConfig:  # pylint: disable=too-many-instance-attributes
    """Every module default plus the root seed."""

    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        rows, cols = self.bank.grid
        tile = min(math.ceil(self.data.image_size / rows), math.ceil(self.data.image_size / cols))
        if tile < MIN_INPUT_SIZE:
            raise ConfigError(
                f"bank.grid {self.bank.grid} cuts {self.data.image_size}px images into "
                f"{tile}px tiles; the encoder needs at least {MIN_INPUT_SIZE}px"
            )
        available = set(range(1, self.saliency.total_levels + 1))
        for combo in self.ablation.level_combos:
            if not combo or not set(combo) <= available:
                raise ConfigError(
                    f"ablation.level_combos entry {combo} references levels outside "
                    f"[1, {self.saliency.total_levels}]"
                )

    def stage_seed(self, stage: str) -> int:
        """Explicit section seed, or one derived from the root seed."""
        section = getattr(self, stage)
        explicit = getattr(section, "seed", None)
        return derive_seed(self.seed, stage) if explicit is None else int(explicit)

    def resolved(self) -> RunConfig:
        """Copy with every stage seed filled in, so a snapshot pins the whole run."""
        updates = {
            stage: replace(getattr(self, stage), seed=self.stage_seed(stage))
            for stage in SEEDED_SECTIONS
        }
        return replace(self, **updates)

    def with_root_seed(self, seed: int) -> RunConfig:
        """Same settings under another root seed; explicit stage seeds are dropped."""
        updates = {stage: replace(getattr(self, stage), seed=None) for stage in SEEDED_SECTIONS}
        return replace(self, seed=seed, **updates)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def _tupled(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tupled(item) for item in value)
    return value


def _build_section(name: str, values: Mapping[str, Any]) -> Any:
    section_type = SECTION_TYPES[name]
    if not isinstance(values, Mapping):
        raise ConfigError(f"Section '{name}' must be a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(section_type)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in section '{name}': {', '.join(unknown)}")
    try:
        return section_type(**{key: _tupled(value) for key, value in values.items()})
    except TypeError as exc:
        raise ConfigError(f"Invalid value in section '{name}': {exc}") from exc


def config_from_dict(document: Mapping[str, Any]) -> RunConfig:
    """Build a validated :class:`RunConfig` from a parsed YAML mapping."""
    if not isinstance(document, Mapping):
        raise ConfigError("The configuration document must be a mapping.")
    unknown = sorted(set(document) - set(SECTION_TYPES) - {"seed"})
    if unknown:
        raise ConfigError(f"Unknown configuration section(s): {', '.join(unknown)}")
    sections = {
        name: _build_section(name, document[name] or {})
        for name in SECTION_TYPES
        if name in document
    }
    seed = document.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    return RunConfig(seed=seed, **sections)


def parse_override(item: str) -> tuple[list[str], Any]:
    """Split ``section.key=value``; the value is parsed as a YAML scalar or list."""
    if "=" not in item:
        raise ConfigError(f"Override {item!r} must have the form section.key=value")
    key, raw = item.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"Override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"Cannot parse value of override {item!r}: {exc}") from exc
    return path, value


def _apply_override(document: dict[str, Any], path: list[str], value: Any) -> None:
    if len(path) == 1:
        if path[0] != "seed":
            raise ConfigError(f"Override key '{path[0]}' must name section.key")
        document["seed"] = value
        return
    if len(path) != 2:
        raise ConfigError(f"Override key {'.'.join(path)!r} is nested too deeply")
    section, key = path
    if section not in SECTION_TYPES:
        raise ConfigError(f"Unknown configuration section '{section}'")
    current = document.get(section) or {}
    document[section] = {**current, key: value}


def load_config(
    path: Path | None = None,
    overrides: Sequence[str] = (),
    seed: int | None = None,
) -> RunConfig:
    """Defaults, then the YAML file, then ``--set`` overrides, then ``--seed``."""
    document: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Configuration file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"Cannot parse {path}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a mapping at the top level")
        document = dict(loaded or {})
    for item in overrides:
        key_path, value = parse_override(item)
        _apply_override(document, key_path, value)
    if seed is not None:
        document["seed"] = seed
    config = config_from_dict(document)
    LOGGER.debug("Configuration loaded (root seed %d)", config.seed)
    return config


def dump_config(config: RunConfig, path: Path) -> None:
    """Write the resolved configuration so the run can be replayed from it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        yaml.safe_dump(config.resolved().to_dict(), sort_keys=False), encoding="utf-8"
    )
