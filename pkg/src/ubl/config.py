"""Declarative experiment configuration with strict JSON validation.

Unknown keys and wrongly typed values are rejected with the dotted path of
the offending field. ``digest()`` hashes the canonical JSON form; every
artifact a run writes carries it.

Seed fan-out: a stage seed is ``derive_seed(master, stage, repeat)``, the
first 32-bit word of ``SeedSequence([master, STAGES[stage], repeat])``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, get_type_hints

import numpy as np

from ubl.attack import AttackConfig
from ubl.data import ConfigError, max_classes
from ubl.model import ARCHITECTURES
from ubl.triggers import TriggerSpec

STRATEGIES = ("clean", "badmatch", "baddist", "baddist+badmatch", "badencoder-lite", "badencoder-lite+badmatch")
STAGES = {"init": 1, "clean": 2, "attack": 3, "finetune": 4, "defense": 5}

TRIGGERS = {
    "white-patch": TriggerSpec.white_patch().to_dict(),
    "black-patch": TriggerSpec.black_patch().to_dict(),
    "fourier": TriggerSpec.default_fourier().to_dict(),
}

# bold (p, iterations) picks of the hyperparameter grid, keyed by setting
PAPER_GRID = {
    "covid-patch-resnet": (0.2, 4000),
    "covid-patch-vit": (0.2, 2000),
    "rsna-patch-resnet": (0.1, 1500),
    "rsna-patch-vit": (0.05, 1000),
    "covid-fourier-resnet": (0.05, 500),
    "covid-fourier-vit": (0.05, 2000),
    "rsna-fourier-resnet": (0.05, 500),
    "rsna-fourier-vit": (0.05, 2000),
}
PAPER_LR = 1e-4


def derive_seed(master: int, stage: str, repeat: int = 0) -> int:
    return int(np.random.SeedSequence([int(master), STAGES[stage], int(repeat)]).generate_state(1)[0])


@dataclass
class DatasetBlock:
    K: int = 2
    counts: dict = field(default_factory=lambda: {"train": 1000, "finetune": 100, "test": 200})
    image_size: int = 64
    seed: int = 0
    path: str | None = None  # read a gen-data directory instead of generating

    def validate(self):
        if not 2 <= self.K <= max_classes():
            raise ConfigError(f"dataset.K must be in [2, {max_classes()}]")
        if set(self.counts) != {"train", "finetune", "test"}:
            raise ConfigError("dataset.counts needs exactly train, finetune and test")
        if any(not isinstance(v, int) or v < 8 for v in self.counts.values()):
            raise ConfigError("dataset.counts values must be integers >= 8")
        if self.image_size < 8 or self.image_size % 8:
            raise ConfigError("dataset.image_size must be a positive multiple of 8")


@dataclass
class ModelBlock:
    backbone: str = "conv-small"
    h: int = 64

    def validate(self):
        if self.backbone not in ARCHITECTURES:
            raise ConfigError(f"model.backbone must be one of {ARCHITECTURES}")
        if self.h < 2:
            raise ConfigError("model.h must be >= 2")


@dataclass
class TrainBlock:
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 0.02
    tau: float = 0.07

    def validate(self):
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0 or self.tau <= 0:
            raise ConfigError("train: iterations >= 0, batch_size >= 1, lr > 0, tau > 0")


@dataclass
class AttackBlock:
    strategy: str = "baddist+badmatch"
    p: float = 0.2
    target_class: int = 1
    trigger: dict = field(default_factory=lambda: dict(TRIGGERS["white-patch"]))
    lambda1: float = 5.0
    lambda2: float = 1.0
    iterations: int = 1000
    batch_size: int = 32
    lr: float = 0.02
    epochs: int = 200
    finetune_lr: float = 0.1
    finetune_batch_size: int = 32
    jitter: float = 0.1
    a1: float = 1.0
    a2: float = 1.0
    symmetric: bool = False

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"attack.strategy must be one of {STRATEGIES}")
        try:
            self.trigger_spec()
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"attack.trigger: {exc}") from exc
        try:
            self.to_attack_config(0, 0.07)
        except ValueError as exc:
            raise ConfigError(f"attack: {exc}") from exc

    def trigger_spec(self) -> TriggerSpec:
        return TriggerSpec.from_dict(self.trigger)

    def to_attack_config(self, seed: int, tau: float) -> AttackConfig:
        return AttackConfig(
            p=self.p, target_class=self.target_class, trigger=self.trigger_spec(),
            iterations=self.iterations, batch_size=self.batch_size, lr=self.lr, tau=tau,
            lambda1=self.lambda1, lambda2=self.lambda2, epochs=self.epochs,
            finetune_lr=self.finetune_lr, finetune_batch_size=self.finetune_batch_size,
            jitter=self.jitter, symmetric=self.symmetric, seed=seed)


@dataclass
class EvalBlock:
    repeats: int = 5
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def validate(self):
        if self.repeats < 1 or len(self.seeds) != self.repeats:
            raise ConfigError("eval.seeds must list exactly eval.repeats seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("eval.seeds must be distinct")


@dataclass
class DefenseBlock:
    augmentations: list = field(default_factory=lambda: ["warp", "affine"])
    mntd_train_pairs: int = 20
    mntd_test_pairs: int = 5
    mntd_probes: int = 16
    mask_window: int = 9

    def validate(self):
        if self.mntd_train_pairs < 10 or self.mntd_test_pairs < 1 or self.mntd_probes < 2:
            raise ConfigError("defense: mntd_train_pairs >= 10, mntd_test_pairs >= 1, mntd_probes >= 2")


@dataclass
class ExperimentConfig:
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    attack: AttackBlock = field(default_factory=AttackBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)
    defense: DefenseBlock | None = None
    seed: int = 0
    out: str | None = None

    def validate(self) -> "ExperimentConfig":
        for block in (self.dataset, self.model, self.train, self.attack, self.eval, self.defense):
            if block is not None:
                block.validate()
        if not 0 <= self.attack.target_class < self.dataset.K:
            raise ConfigError("attack.target_class must index a dataset class")
        if self.defense and self.defense.mask_window > self.dataset.image_size:
            raise ConfigError("defense.mask_window exceeds the image size")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def dataset_digest(self) -> str:
        d = asdict(self.dataset)
        d.pop("path")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "").validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        return replace(self, seed=self.seed if seed is None else seed, out=self.out if out is None else out)


def _check_type(value: Any, hint: Any, path: str) -> Any:
    # hints here are plain builtins or "X | None"
    options = getattr(hint, "__args__", None) or (hint,)
    if value is None:
        if type(None) in options:
            return None
        raise ConfigError(f"{path}: null is not allowed")
    for t in options:
        if t is type(None):
            continue
        origin = getattr(t, "__origin__", t)
        if origin is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if origin is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if origin is bool and isinstance(value, bool):
            return value
        if origin in (str, dict, list) and isinstance(value, origin):
            return value
    raise ConfigError(f"{path}: expected {hint}, got {type(value).__name__}")


def _build(cls, d: Any, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown field {prefix}{unknown[0]}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        path = prefix + f.name
        hint = hints[f.name]
        sub = [a for a in getattr(hint, "__args__", (hint,)) if is_dataclass(a)]
        if sub and d[f.name] is not None:
            kwargs[f.name] = _build(sub[0], d[f.name], path + ".")
        else:
            kwargs[f.name] = _check_type(d[f.name], hint, path)
    return cls(**kwargs)


def preset(name: str, backbone: str = "conv-small") -> ExperimentConfig:
    """Named starting points: ``desk`` defaults or a ``paper-<setting>`` grid pick.

    Paper presets use the published learning rate and (p, iterations); at
    desk scale they train far too slowly to plant a backdoor.
    """
    cfg = ExperimentConfig(model=ModelBlock(backbone=backbone))
    if name == "desk":
        return cfg.validate()
    key = name.removeprefix("paper-")
    if key not in PAPER_GRID:
        raise ConfigError(f"unknown preset {name!r}; choose desk or paper-<{'|'.join(PAPER_GRID)}>")
    p, iters = PAPER_GRID[key]
    trig = TRIGGERS["fourier" if "fourier" in key else "white-patch"]
    cfg.train = TrainBlock(iterations=4000, lr=PAPER_LR)
    cfg.attack = AttackBlock(p=p, iterations=iters, lr=PAPER_LR, finetune_lr=PAPER_LR, trigger=dict(trig))
    return cfg.validate()
