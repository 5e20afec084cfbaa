"""Run configuration: nested component configs read from a TOML file.

Example file::

    seed = 3
    lambda = 5.0

    [task]
    n_train = 1000

    [finetune]
    max_epochs = 2

Sections are ``task``, ``model``, ``train`` (baseline), ``finetune``,
``classifier`` and ``perturb``. Top-level ``seed`` overrides the seed of
every section.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .classifier import EnsembleConfig
from .lab import SyntheticTaskSpec
from .model import ModelConfig
from .objective import TrainingConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _baseline_training() -> TrainingConfig:
    # validation CE; the hallucination rate on a small split swings too much
    # between epochs to pick a converged baseline
    return TrainingConfig(lr=1e-3, warmup_steps=300, max_epochs=15, patience=15, metric="ce")


def _finetune_training() -> TrainingConfig:
    # lr is replaced by the baseline's last learning rate at fine-tune time
    return TrainingConfig(max_epochs=3, patience=3)


@dataclass
class SweepConfig:
    positions: list[int] = field(default_factory=lambda: list(range(8)))
    max_sentences: int = 200


@dataclass
class RunConfig:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainingConfig = field(default_factory=_baseline_training)
    finetune: TrainingConfig = field(default_factory=_finetune_training)
    classifier: EnsembleConfig = field(default_factory=EnsembleConfig)
    perturb: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0
    threshold: float = 25.0
    clean_threshold: float = 85.0
    attribution_limit: int = 200

    def __post_init__(self):
        self.reseed(self.seed)

    def reseed(self, seed: int) -> "RunConfig":
        """Propagate one seed to every nested random source."""
        self.seed = int(seed)
        self.task = replace(self.task, seed=self.seed)
        self.model = replace(self.model, seed=self.seed)
        self.train = replace(self.train, seed=self.seed)
        self.finetune = replace(self.finetune, seed=self.seed)
        self.classifier = replace(self.classifier, seed=self.seed)
        return self

    def set_lambda(self, lam: float) -> "RunConfig":
        if lam < 0:
            raise ConfigError("lambda must be non-negative")
        self.finetune = replace(self.finetune, lam=float(lam))
        return self

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "task": SyntheticTaskSpec,
    "model": ModelConfig,
    "train": TrainingConfig,
    "finetune": TrainingConfig,
    "classifier": EnsembleConfig,
    "perturb": SweepConfig,
}
_TOP = {"seed", "lambda", "threshold", "clean_threshold", "attribution_limit"}


def config_from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    unknown = set(d) - set(_SECTIONS) - _TOP
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    try:
        for name, cls in _SECTIONS.items():
            section = d.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a table")
            allowed = {f.name for f in fields(cls)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(bad))}")
            setattr(cfg, name, replace(getattr(cfg, name), **section))
        for key in ("threshold", "clean_threshold"):
            if key in d:
                setattr(cfg, key, float(d[key]))
        if "attribution_limit" in d:
            cfg.attribution_limit = int(d["attribution_limit"])
        cfg.reseed(int(d.get("seed", cfg.seed)))
        if "lambda" in d:
            cfg.set_lambda(float(d["lambda"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.threshold >= cfg.clean_threshold:
        raise ConfigError("threshold must be below clean_threshold")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)
