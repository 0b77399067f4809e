"""Run configuration: one YAML file with ``data``, ``split``, ``train`` and ``eval`` sections."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .data import DataGenConfig
from .errors import ConfigError, ContractViolation
from .train import TrainConfig

SECTIONS = ("data", "split", "train", "eval")
ABLATION_FLAGS = {"mi": "ablate_mi", "clsf": "ablate_clsf", "sal": "ablate_sal"}


@dataclass
class SplitConfig:
    fractions: tuple = (0.7, 0.1, 0.2)
    seed: int = 0
    stratify_on_y: bool = True

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ConfigError("split.fractions must be three non-negative numbers summing to 1", ["split.fractions"])


@dataclass
class EvalConfig:
    seed: int = 0
    n_gallery: int = 8


@dataclass
class RunConfig:
    data: DataGenConfig = field(default_factory=DataGenConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return {
            "data": self.data.to_dict(),
            "split": {**dataclasses.asdict(self.split), "fractions": list(self.split.fractions)},
            "train": self.train.to_dict(),
            "eval": dataclasses.asdict(self.eval),
        }

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _check_keys(cls, d, prefix):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = [f"{prefix}{k}" for k in d if k not in names]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}", unknown)


def _build(cls, d, prefix):
    d = dict(d or {})
    _check_keys(cls, d, prefix)
    try:
        return cls(**d)
    except ConfigError as exc:
        raise ConfigError(str(exc), [f"{prefix}{f}" for f in exc.fields]) from exc
    except (ContractViolation, TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}", [prefix.rstrip(".")]) from exc


def from_dict(d: dict) -> RunConfig:
    d = copy.deepcopy(d or {})
    _check_keys(RunConfig, d, "")
    train = dict(d.get("train") or {})
    _check_keys(TrainConfig, train, "train.")
    from .losses import LossWeights
    from .model import ModelConfig

    train["weights"] = _build(LossWeights, train.get("weights"), "train.weights.")
    train["model"] = _build(ModelConfig, train.get("model"), "train.model.")
    return RunConfig(
        data=_build(DataGenConfig, d.get("data"), "data."),
        split=_build(SplitConfig, d.get("split"), "split."),
        train=_build(TrainConfig, train, "train."),
        eval=_build(EvalConfig, d.get("eval"), "eval."),
    )


def default_config_dict() -> dict:
    text = resources.files("sepvae").joinpath("configs/synthetic_small.yaml").read_text()
    return yaml.safe_load(text)


def apply_override(d: dict, assignment: str) -> dict:
    """Apply ``dotted.key=value`` in place; the value is parsed as YAML.

    Keys that do not start with a top-level section are looked up under
    ``train`` (so ``weights.gamma=1`` means ``train.weights.gamma=1``).
    """
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value", [assignment])
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in SECTIONS:
        parts = ["train"] + parts
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-section value", [key])
    node[parts[-1]] = yaml.safe_load(raw)
    return d


def load_config(path=None, overrides=()) -> RunConfig:
    """Parse ``path`` (or the packaged default), apply overrides, validate."""
    if path is None:
        d = default_config_dict()
    else:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})", [str(path)]) from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping", [str(path)])
    for assignment in overrides:
        apply_override(d, assignment)
    return from_dict(d)


def apply_ablations(d: dict, names) -> dict:
    """Switch on ``train.weights.ablate_<name>`` for each name in ``names`` (mi, clsf, sal)."""
    weights = d.setdefault("train", {}).setdefault("weights", {})
    for name in names:
        name = name.strip().lower()
        if not name:
            continue
        if name not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATION_FLAGS)}", ["--ablate"])
        weights[ABLATION_FLAGS[name]] = True
    return d
