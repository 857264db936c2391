"""Synthetic unpaired image-text data with multi-hot labels, prompt sets, and dataset files.

Class ``c`` images are a flat background plus a bright Gaussian blob at a
class-specific location plus white noise. Class ``c`` texts are short token
sequences drawn from a shared template vocabulary plus the class's own tokens.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ubl import numcore as nc

SPLITS = {"train": 0, "finetune": 1, "test": 2}

VOCAB = 64
N_TEMPLATE_TOKENS = 24
TOKENS_PER_CLASS = 2
PROMPTS_PER_CLASS = 10
MAX_TEXT_LEN = 8

BACKGROUND = 60.0
BACKGROUND_JITTER = 5.0
BLOB_AMPLITUDE = 90.0
BLOB_SIGMA = 5.0
BLOB_JITTER = 2.0
NOISE_SIGMA = 12.0


class ConfigError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class LabelVector:
    bits: tuple[int, ...]

    def __post_init__(self):
        if not self.bits or any(b not in (0, 1) for b in self.bits):
            raise nc.DomainError(f"label bits must be 0/1, got {self.bits}")
        if not any(self.bits):
            raise nc.DomainError("a label vector needs at least one set bit")

    @classmethod
    def one_hot(cls, k: int, c: int) -> "LabelVector":
        return cls(tuple(int(i == c) for i in range(k)))

    @property
    def k(self) -> int:
        return len(self.bits)

    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.uint8)


@dataclass
class Sample:
    image: np.ndarray
    tokens: tuple[int, ...]
    image_label: LabelVector
    text_label: LabelVector


@dataclass
class Dataset:
    """Column-oriented sample store; ``ds[i]`` gives a :class:`Sample` view."""

    images: np.ndarray  # (N, S, S) float32
    tokens: list[tuple[int, ...]]
    image_labels: np.ndarray  # (N, K) uint8
    text_labels: np.ndarray  # (N, K) uint8
    class_names: list[str]
    split: str
    seed: int

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.tokens[i],
                      LabelVector(tuple(int(b) for b in self.image_labels[i])),
                      LabelVector(tuple(int(b) for b in self.text_labels[i])))

    @property
    def k(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def classes(self) -> np.ndarray:
        """Primary class index per sample (argmax of the image label)."""
        return self.image_labels.argmax(axis=1)

    def class_counts(self) -> list[int]:
        return np.bincount(self.classes, minlength=self.k).tolist()

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], [self.tokens[i] for i in idx], self.image_labels[idx],
                       self.text_labels[idx], list(self.class_names), self.split, self.seed)


@dataclass
class PromptSet:
    prompts: list[list[tuple[int, ...]]]  # per class, PROMPTS_PER_CLASS token sequences
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        for c, ps in enumerate(self.prompts):
            if len(ps) != PROMPTS_PER_CLASS:
                raise ConfigError(f"class {c} has {len(ps)} prompts, need {PROMPTS_PER_CLASS}")

    def __len__(self) -> int:
        return sum(len(p) for p in self.prompts)


def class_tokens(c: int) -> tuple[int, ...]:
    first = N_TEMPLATE_TOKENS + TOKENS_PER_CLASS * c
    return tuple(range(first, first + TOKENS_PER_CLASS))


def max_classes(vocab: int = VOCAB) -> int:
    return (vocab - N_TEMPLATE_TOKENS) // TOKENS_PER_CLASS


def default_class_names(k: int) -> list[str]:
    if k == 2:
        return ["negative", "positive"]
    return [f"class{c}" for c in range(k)]


def blob_centers(k: int, size: int) -> np.ndarray:
    """Class blob centres on a ring in the upper part of the frame.

    The bottom rows stay free for patch triggers.
    """
    cy, cx = 0.44 * size, 0.5 * size
    r = 0.28 * size
    angles = 2 * math.pi * np.arange(k) / k
    return np.stack([cy + r * np.sin(angles) * (0.6 if k > 2 else 1.0), cx + r * np.cos(angles)], axis=1)


def render_image(c: int, k: int, size: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = blob_centers(k, size)[c] + rng.uniform(-BLOB_JITTER, BLOB_JITTER, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    blob = BLOB_AMPLITUDE * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * BLOB_SIGMA ** 2))
    base = BACKGROUND + rng.uniform(-BACKGROUND_JITTER, BACKGROUND_JITTER)
    img = base + blob + rng.normal(0.0, NOISE_SIGMA, size=(size, size))
    return np.clip(img, 0, 255).astype(np.float32)


def render_text(c: int, rng: np.random.Generator) -> tuple[int, ...]:
    n_tmpl = int(rng.integers(2, MAX_TEXT_LEN - TOKENS_PER_CLASS + 1))
    tmpl = rng.choice(N_TEMPLATE_TOKENS, size=n_tmpl, replace=False).tolist()
    cls = class_tokens(c)
    n_cls = int(rng.integers(1, len(cls) + 1))
    picked = rng.choice(cls, size=n_cls, replace=False).tolist()
    toks = tmpl + picked
    rng.shuffle(toks)
    return tuple(int(t) for t in toks)


def gen_synthetic_dataset(k_classes: int = 2, counts: int | dict = 100, image_size: int = 64,
                          seed: int = 0, split: str = "train",
                          class_names: list[str] | None = None) -> Dataset:
    """Generate ``counts`` samples per class for one split.

    Each sample's randomness comes from ``(seed, split, index)`` only.
    """
    if k_classes < 2:
        raise ConfigError("need at least two classes")
    if k_classes > max_classes():
        raise ConfigError(f"{k_classes} classes exceed the token template capacity of {max_classes()}")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    per_class = counts[split] if isinstance(counts, dict) else int(counts)
    if per_class < 8:
        raise ConfigError("need at least 8 samples per class per split")
    names = class_names or default_class_names(k_classes)
    if len(names) != k_classes or len(set(names)) != k_classes:
        raise ConfigError("class names must be distinct, one per class")

    n = per_class * k_classes
    images = np.empty((n, image_size, image_size), dtype=np.float32)
    tokens = []
    labels = np.zeros((n, k_classes), dtype=np.uint8)
    for i in range(n):
        c = i % k_classes
        rng = np.random.default_rng([seed, SPLITS[split], i])
        images[i] = render_image(c, k_classes, image_size, rng)
        tokens.append(render_text(c, rng))
        labels[i, c] = 1
    return Dataset(images, tokens, labels, labels.copy(), list(names), split, seed)


def make_prompts(class_names: list[str], seed: int = 0) -> PromptSet:
    """Ten prompts per class: shared template skeletons + the class's tokens."""
    if len(set(class_names)) != len(class_names):
        raise ConfigError("class names must be distinct")
    rng = np.random.default_rng([seed, 7919])
    skeletons = []
    for _ in range(PROMPTS_PER_CLASS):
        n = int(rng.integers(2, MAX_TEXT_LEN - TOKENS_PER_CLASS + 1))
        skeletons.append(rng.choice(N_TEMPLATE_TOKENS, size=n, replace=False).tolist())
    prompts = []
    for c in range(len(class_names)):
        cls = list(class_tokens(c))
        prompts.append([tuple(int(t) for t in sk + cls) for sk in skeletons])
    return PromptSet(prompts, list(class_names))


# -- dataset files --------------------------------------------------------

def write_dataset(path, ds: Dataset) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "ubl-dataset",
        "version": 1,
        "class_names": ds.class_names,
        "counts": ds.class_counts(),
        "n_samples": len(ds),
        "seed": ds.seed,
        "split": ds.split,
        "image_size": ds.image_size,
        "K": ds.k,
        "samples": [
            {"image_label": ds.image_labels[i].tolist(),
             "text_label": ds.text_labels[i].tolist(),
             "tokens": list(ds.tokens[i])}
            for i in range(len(ds))
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    with open(out / "images.bfmt", "wb") as fh:
        nc.write_bfmt(fh, ds.images)


def read_dataset(path) -> Dataset:
    src = Path(path)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except ValueError as exc:
        raise nc.FormatError(f"unreadable manifest: {exc}") from exc
    with open(src / "images.bfmt", "rb") as fh:
        images = nc.read_bfmt(fh)
    samples = manifest["samples"]
    n, k, size = manifest["n_samples"], manifest["K"], manifest["image_size"]
    if not (len(samples) == n == images.shape[0] == sum(manifest["counts"])):
        raise IntegrityError(
            f"manifest claims {n} samples ({len(samples)} listed, counts sum {sum(manifest['counts'])}) "
            f"but payload holds {images.shape[0]}")
    if images.shape[1:] != (size, size):
        raise IntegrityError(f"payload image shape {images.shape[1:]} != declared {size}")
    img_labels = np.array([s["image_label"] for s in samples], dtype=np.uint8).reshape(n, k)
    txt_labels = np.array([s["text_label"] for s in samples], dtype=np.uint8).reshape(n, k)
    if np.any(img_labels.sum(1) == 0) or np.any(txt_labels.sum(1) == 0):
        raise IntegrityError("a label vector has no set bit")
    tokens = [tuple(int(t) for t in s["tokens"]) for s in samples]
    return Dataset(images, tokens, img_labels, txt_labels, list(manifest["class_names"]),
                   manifest["split"], manifest["seed"])
