"""Inference-time defenses: input augmentation, MNTD-style meta detection, robust masking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates
from sklearn.linear_model import LogisticRegression

from ubl import numcore as nc
from ubl.data import ConfigError, Dataset, PromptSet, render_image
from ubl.evaluate import class_prototypes, embed_images, evaluate_targeted, predict
from ubl.model import CELL, EncoderParams, _prep_images, conv_features
from ubl.triggers import PatchSpec, TriggerSpec

TRANSFORMS = ("warp", "affine", "none")


class DiagnosticError(RuntimeError):
    pass


# -- test-time augmentation ------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    transforms: tuple[str, ...] = ("warp", "affine")
    seed: int = 0
    warp_amplitude: float = 2.0  # pixels
    max_rotation: float = 10.0  # degrees
    max_translation: float = 0.08  # fraction of width

    def __post_init__(self):
        if not self.transforms:
            raise ConfigError("augmentation policy needs at least one transform")
        bad = [t for t in self.transforms if t not in TRANSFORMS]
        if bad:
            raise ConfigError(f"unknown transforms {bad}; choose from {TRANSFORMS}")
        if not (0 <= self.warp_amplitude <= 2 and 0 <= self.max_rotation <= 10
                and 0 <= self.max_translation <= 0.08):
            raise ConfigError("augmentation strengths exceed the policy bounds")

    @property
    def is_identity(self) -> bool:
        return all(t == "none" for t in self.transforms)

    def apply(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float32)
        single = x.ndim == 2
        x = x[None] if single else x
        out = np.stack([self._one(im, np.random.default_rng([self.seed, 41, i]))
                        for i, im in enumerate(x)]) if len(x) else x.copy()
        return out[0] if single else out

    def _one(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        h, w = image.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        for name in self.transforms:
            if name == "warp":
                fy, fx = rng.uniform(0.5, 2.0, size=2)
                py, px = rng.uniform(0, 2 * np.pi, size=2)
                dy = self.warp_amplitude * np.sin(2 * np.pi * fy * xx / w + py)
                dx = self.warp_amplitude * np.sin(2 * np.pi * fx * yy / h + px)
                yy, xx = yy + dy, xx + dx
            elif name == "affine":
                theta = math.radians(rng.uniform(-self.max_rotation, self.max_rotation))
                ty, tx = rng.uniform(-self.max_translation, self.max_translation, size=2) * w
                cy, cx = (h - 1) / 2, (w - 1) / 2
                ry, rx = yy - cy - ty, xx - cx - tx
                c, s = math.cos(theta), math.sin(theta)
                yy, xx = c * ry - s * rx + cy, s * ry + c * rx + cx
        if self.is_identity:
            return image.copy()
        out = map_coordinates(image.astype(np.float64), [yy, xx], order=1, mode="nearest")
        return np.clip(out, 0, 255).astype(np.float32)


def augmentation_defense_eval(params: EncoderParams, test: Dataset, trigger: TriggerSpec, target: int,
                              prompts: PromptSet, policy: AugmentationPolicy) -> tuple[float, float]:
    """BSR without and with the policy applied to every input at inference time."""
    protos = class_prototypes(params, prompts)
    before = evaluate_targeted(params, test, trigger, target, prompts,
                               predictor=lambda ims: predict(params, ims, prompts, protos))
    after = evaluate_targeted(params, test, trigger, target, prompts,
                              predictor=lambda ims: predict(params, policy.apply(ims), prompts, protos))
    return before.BSR, after.BSR


# -- MNTD-lite -------------------------------------------------------------

@dataclass
class MetaDetector:
    probes: np.ndarray  # (P, S, S) frozen probe images
    coef: np.ndarray | None = None
    intercept: float = 0.0
    n_train_pairs: int = 0

    def score(self, features: np.ndarray) -> np.ndarray:
        """Trojan probability per feature row."""
        z = np.atleast_2d(features) @ self.coef + self.intercept
        return 1.0 / (1.0 + np.exp(-z))

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.score(features) > 0.5).astype(int)


def make_probes(image_size: int, k: int, n: int = 16, seed: int = 0) -> np.ndarray:
    """Half synthetic-looking class images, half uniform noise; fixed by ``seed``."""
    rng = np.random.default_rng([seed, 53])
    probes = [render_image(i % k, k, image_size, rng) for i in range(n // 2)]
    probes += [rng.uniform(0, 255, size=(image_size, image_size)).astype(np.float32)
               for _ in range(n - n // 2)]
    return np.stack(probes)


def _random_patch(rng: np.random.Generator, size: int) -> TriggerSpec:
    side = int(rng.integers(4, 13))
    row, col = (int(v) for v in rng.integers(0, size - side + 1, size=2))
    return TriggerSpec("patch", patch=PatchSpec(float(rng.choice([0.0, 255.0])), side, "custom", row, col))


def _fit_head(emb: np.ndarray, y: np.ndarray, seed: int) -> LogisticRegression:
    return LogisticRegression(C=1.0, max_iter=500, random_state=seed).fit(emb, y)


def _head_features(head: LogisticRegression, probe_emb: np.ndarray) -> np.ndarray:
    return head.decision_function(probe_emb).ravel()


def _shadow_head(emb_fn, data: Dataset, rng: np.random.Generator, corrupt: bool, seed: int):
    idx = np.sort(rng.choice(len(data), size=min(len(data), 64), replace=False))
    images = data.images[idx].copy()
    y = data.classes[idx].copy()
    if corrupt:
        trig = _random_patch(rng, data.image_size)
        target = int(rng.integers(data.k))
        poison = rng.random(len(idx)) < 0.5
        images[poison] = trig.apply(images[poison])
        y[poison] = target
    if len(np.unique(y)) < 2:
        y[0] = (y[0] + 1) % data.k
    return _fit_head(emb_fn(images), y, seed)


def mntd_lite(clean: EncoderParams, suspect: EncoderParams, data: Dataset, n_train_pairs: int = 20,
              n_test_pairs: int = 5, seed: int = 0, n_probes: int = 16) -> tuple[float, MetaDetector]:
    """Meta-classifier detection accuracy on held-out (clean, suspect) head pairs.

    Shadow pairs are a clean and a patch-poisoned linear head on the frozen
    clean encoder. Each held-out pair is one head on the clean encoder
    (label 0) and one on the suspect encoder (label 1), trained with the
    same data and seed.
    """
    if n_train_pairs < 10:
        raise ConfigError("mntd_lite needs at least 10 training pairs")
    if n_test_pairs < 1:
        raise ConfigError("mntd_lite needs at least one held-out pair")
    probes = make_probes(data.image_size, data.k, n_probes, seed)
    emb_clean = lambda ims: embed_images(clean, ims)
    emb_suspect = lambda ims: embed_images(suspect, ims)
    probe_clean, probe_suspect = emb_clean(probes), emb_suspect(probes)
    if np.allclose(probe_clean, probe_clean[0]) or np.allclose(probe_suspect, probe_suspect[0]):
        raise DiagnosticError("all probe embeddings are identical; the probe set carries no signal")

    feats, labels = [], []
    for i in range(n_train_pairs):
        for corrupt in (False, True):
            rng = np.random.default_rng([seed, 59, i, int(corrupt)])
            head = _shadow_head(emb_clean, data, rng, corrupt, seed + i)
            feats.append(_head_features(head, probe_clean))
            labels.append(int(corrupt))
    feats = np.array(feats)
    if np.allclose(feats, feats[0]):
        raise DiagnosticError("shadow heads give identical probe outputs")
    meta = LogisticRegression(C=1.0, max_iter=2000, random_state=seed).fit(feats, labels)
    det = MetaDetector(probes, meta.coef_.ravel(), float(meta.intercept_[0]), n_train_pairs)

    correct = 0
    for j in range(n_test_pairs):
        for label, (fn, pe) in enumerate(((emb_clean, probe_clean), (emb_suspect, probe_suspect))):
            rng = np.random.default_rng([seed, 61, j])
            head = _shadow_head(fn, data, rng, False, seed + 10_000 + j)
            correct += int(det.predict(_head_features(head, pe))[0] == label)
    return correct / (2 * n_test_pairs), det


# -- robust masking --------------------------------------------------------

@dataclass(frozen=True)
class MaskingConfig:
    window: int = 9  # pixels; defaults to the trigger side
    cell: int = CELL

    def cells_per_window(self) -> int:
        # a window of w pixels overlaps at most this many grid cells per axis
        return (self.window + self.cell - 2) // self.cell + 1

    def validate(self, image_size: int) -> None:
        if self.window < 1 or self.window > image_size:
            raise ConfigError(f"masking window {self.window} does not fit a {image_size}-pixel image")


@dataclass
class ArrayLocalHead:
    """Local head given directly as per-cell class logits (G, G, K)."""

    logits: np.ndarray
    bias: np.ndarray | None = None
    cell: int = CELL

    def cell_logits(self, image) -> tuple[np.ndarray, np.ndarray]:
        k = self.logits.shape[-1]
        return self.logits, np.zeros(k) if self.bias is None else self.bias


@dataclass
class ConvLocalHead:
    """conv-small's head decomposes over cells: z = sum_c f_c W_c + b.

    Class score z . proto_k splits into one term per cell plus a bias term;
    the argmax over classes is unaffected by the missing normalisation.
    """

    params: EncoderParams
    prompts: PromptSet
    cell: int = CELL
    _protos: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.params.arch != "conv-small":
            raise ConfigError("robust masking needs the cell-decomposable conv-small head")
        self._protos = class_prototypes(self.params, self.prompts)

    def cell_logits(self, image) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        x = _prep_images(np.asarray(image, np.float32), p.image_size)
        feats = conv_features(p.constants(), x).data[0]  # (cells*C,)
        g = p.image_size // CELL
        w = p.tensors["img.head.w"].reshape(g * g, -1, p.h)
        per_cell = np.einsum("nc,nch->nh", feats.reshape(g * g, -1), w) @ self._protos.T
        return per_cell.reshape(g, g, -1), p.tensors["img.head.b"] @ self._protos.T


def _window_sums(ev: np.ndarray, m: int) -> np.ndarray:
    g = ev.shape[0]
    m = min(m, g)
    c = np.pad(ev.cumsum(0).cumsum(1), ((1, 0), (1, 0), (0, 0)))
    return c[m:, m:] - c[:-m, m:] - c[m:, :-m] + c[:-m, :-m]


def robust_mask_classify(head, image, cfg: MaskingConfig) -> int:
    """Clip cell evidence at zero, drop each class's strongest window, argmax the rest."""
    logits, bias = head.cell_logits(image)
    cfg.validate(logits.shape[0] * head.cell)
    ev = np.maximum(logits, 0.0)
    windows = _window_sums(ev, cfg.cells_per_window())
    scores = ev.sum(axis=(0, 1)) - windows.max(axis=(0, 1)) + bias
    return int(np.argmax(scores))


def masked_accuracy(head, images: np.ndarray, classes: np.ndarray, cfg: MaskingConfig) -> float:
    pred = np.array([robust_mask_classify(head, im, cfg) for im in images])
    return float(np.mean(pred == classes))
