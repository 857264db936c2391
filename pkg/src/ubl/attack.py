"""Semantic-matching training and the backdoor attacks built on it.

Batch conventions: row ``i`` of every N×N matrix is image ``i``; column ``j``
is text ``j``. ``I`` and ``T`` hold the image and text label vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ubl import numcore as nc
from ubl.data import Dataset, LabelVector
from ubl.model import EncoderParams, image_embed, sgd_step, text_embed
from ubl.numcore import Tensor
from ubl.triggers import TriggerSpec


class TrainingError(ArithmeticError):
    """Raised when a loss goes non-finite; carries the step diagnostics."""

    def __init__(self, step: int, loss: float, grad_norms: dict[str, float]):
        self.step, self.loss, self.grad_norms = step, loss, grad_norms
        worst = max(grad_norms.items(), key=lambda kv: kv[1], default=("-", 0.0))
        super().__init__(f"non-finite loss {loss} at step {step} (largest grad norm {worst[0]}={worst[1]:.3g})")


@dataclass
class AttackConfig:
    p: float = 0.2
    target_class: int = 1
    trigger: TriggerSpec = field(default_factory=TriggerSpec.white_patch)
    iterations: int = 1000
    batch_size: int = 32
    lr: float = 0.02
    tau: float = 0.07
    lambda1: float = 5.0
    lambda2: float = 1.0
    # fine-tuning stage (BadDist / BadEncoder-lite) has its own schedule
    epochs: int = 200
    finetune_lr: float = 0.1
    finetune_batch_size: int = 32
    jitter: float = 0.1
    momentum: float = 0.0
    symmetric: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise nc.DomainError(f"p must be in [0, 1], got {self.p}")
        if not self.tau > 0:
            raise nc.DomainError(f"tau must be positive, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise nc.DomainError("lambda1 and lambda2 must be non-negative")
        if self.batch_size < 1 or self.finetune_batch_size < 1:
            raise nc.DomainError("batch sizes must be >= 1")
        if self.iterations < 0 or self.epochs < 0:
            raise nc.DomainError("iterations and epochs must be >= 0")
        if not (self.lr > 0 and self.finetune_lr > 0) or self.jitter < 0 or not 0 <= self.momentum < 1:
            raise nc.DomainError("learning rates must be positive, jitter >= 0, momentum in [0, 1)")

    def target_label(self, k: int) -> LabelVector:
        return LabelVector.one_hot(k, self.target_class)


# -- matrices and losses --------------------------------------------------

@dataclass
class SemanticMatrix:
    values: np.ndarray
    poisoned: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class PredictiveMatrix:
    logits: Tensor
    tau: float = 0.07


def build_semantic_matrix(I, T, poisoned=None) -> SemanticMatrix:
    """SM[i, j] = cos(I_i, T_j) between image and text label vectors."""
    I = np.asarray(I, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if I.ndim != 2 or I.shape != T.shape:
        raise nc.ShapeError(f"label matrices must both be N×K, got {I.shape} and {T.shape}")
    ni = np.sqrt((I * I).sum(axis=1))
    nt = np.sqrt((T * T).sum(axis=1))
    if np.any(ni == 0) or np.any(nt == 0):
        raise nc.DomainError("every label row needs at least one set bit")
    sm = (I @ T.T) / np.outer(ni, nt)
    flags = np.zeros(len(I), dtype=bool) if poisoned is None else np.asarray(poisoned, dtype=bool)
    return SemanticMatrix(sm, flags)


def predictive_matrix(img_emb: Tensor, txt_emb: Tensor, tau: float = 0.07) -> PredictiveMatrix:
    return PredictiveMatrix(nc.cosine_matrix(img_emb, txt_emb), tau)


def contrastive_nll(pm: PredictiveMatrix) -> Tensor:
    """ŷ[i, j] = -log softmax_j(logits[i, :] / tau)[j]."""
    return nc.neg(nc.log_softmax_rows(pm.logits, pm.tau))


def semantic_matching_loss(sm: SemanticMatrix | np.ndarray, nll: Tensor) -> Tensor:
    values = sm.values if isinstance(sm, SemanticMatrix) else np.asarray(sm)
    if values.shape != nll.shape:
        raise nc.ShapeError(f"SM {values.shape} and ŷ {nll.shape} differ")
    soft = nc.softmax_rows(Tensor(values.astype(nll.data.dtype))).data
    n = values.shape[0]
    return nc.scale(nc.tsum(nc.mul(Tensor(soft), nll)), 1.0 / n)


def medclip_loss(img_emb: Tensor, txt_emb: Tensor, I, T, tau: float, symmetric: bool = False) -> Tensor:
    sm = build_semantic_matrix(I, T)
    pm = predictive_matrix(img_emb, txt_emb, tau)
    loss = semantic_matching_loss(sm, contrastive_nll(pm))
    if symmetric:
        pm_t = PredictiveMatrix(nc.transpose(pm.logits), tau)
        back = semantic_matching_loss(SemanticMatrix(sm.values.T, sm.poisoned), contrastive_nll(pm_t))
        loss = nc.scale(loss + back, 0.5)
    return loss


@dataclass
class BadDistEmbeddings:
    """Batches (N×h) of clean/poisoned inputs through the clean (c, b) and backdoor (c', b') models."""

    c: Tensor
    c_prime: Tensor
    b: Tensor
    b_prime: Tensor


def baddist_loss(e: BadDistEmbeddings, lambda1: float = 5.0, lambda2: float = 1.0) -> Tensor:
    """lambda1 * (-mean cos(c, c')) + lambda2 * mean cos(b, b')."""
    keep = nc.tmean(nc.rowwise_cosine(e.c, e.c_prime))
    push = nc.tmean(nc.rowwise_cosine(e.b, e.b_prime))
    return nc.scale(keep, -lambda1) + nc.scale(push, lambda2)


def badencoder_lite_loss(poisoned_tilde: Tensor, target_star: Tensor, clean_tilde: Tensor,
                         clean_star: Tensor, a1: float = 1.0, a2: float = 1.0) -> Tensor:
    """a1 * (-mean cos(f~(x+trigger), f*(x_target))) + a2 * (-mean cos(f~(x), f*(x)))."""
    n = poisoned_tilde.shape[0]
    ones = Tensor(np.ones((n, 1), dtype=target_star.data.dtype))
    anchor = nc.matmul(ones, nc.reshape(target_star, (1, -1)))
    align = nc.tmean(nc.rowwise_cosine(poisoned_tilde, anchor))
    keep = nc.tmean(nc.rowwise_cosine(clean_tilde, clean_star))
    return nc.scale(align, -a1) + nc.scale(keep, -a2)


# -- poisoning ------------------------------------------------------------

def badmatch_poison_batch(batch: Dataset, config: AttackConfig, rng: np.random.Generator):
    """Flip each image label to the target with probability p and stamp the trigger.

    Returns ``(batch', I', mask)``; texts and text labels are shared, not copied.
    """
    mask = rng.random(len(batch)) < config.p
    target = config.target_label(batch.k).array()
    images = batch.images.copy()
    labels = batch.image_labels.copy()
    if mask.any():
        images[mask] = config.trigger.apply(batch.images[mask])
        labels[mask] = target
    out = Dataset(images, batch.tokens, labels, batch.text_labels, batch.class_names, batch.split, batch.seed)
    return out, labels, mask


def _grad_norms(leaves: dict[str, Tensor]) -> dict[str, float]:
    return {k: float(np.linalg.norm(t.grad)) if t.grad is not None else 0.0 for k, t in leaves.items()}


def _check_finite(step: int, loss: Tensor, leaves: dict[str, Tensor]) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingError(step, float(loss.data), _grad_norms(leaves))


# -- training loops -------------------------------------------------------

def train_badmatch(params: EncoderParams, dataset: Dataset, config: AttackConfig,
                   start_step: int = 0, trace: list | None = None) -> EncoderParams:
    """Semantic-matching training on per-batch BadMatch-poisoned data.

    With ``p = 0`` this is plain unpaired contrastive training. Batch
    sampling and poisoning at step ``s`` depend only on ``(seed, s)``, so a
    run resumed from a checkpoint at step ``s`` continues identically.
    """
    if len(dataset) == 0:
        raise nc.DomainError("empty dataset")
    if not params.is_finite():
        raise nc.NumericError("model parameters are not finite")
    n = min(config.batch_size, len(dataset))
    velocity: dict = {}
    for step in range(start_step, config.iterations):
        rng = np.random.default_rng([config.seed, 17, step])
        idx = np.sort(rng.choice(len(dataset), size=n, replace=False))
        batch, I, mask = badmatch_poison_batch(dataset.subset(idx), config, rng)
        leaves = params.leaves()
        img = image_embed(params, batch.images, leaves)
        txt = text_embed(params, batch.tokens, leaves)
        loss = medclip_loss(img, txt, I, batch.text_labels, config.tau, config.symmetric)
        if loss.requires_grad:
            loss.backward()
        _check_finite(step, loss, leaves)
        params = sgd_step(params, leaves, config.lr, config.momentum, velocity)
        if trace is not None:
            trace.append({"step": step, "loss": float(loss.data), "poisoned": int(mask.sum())})
    return params


def _jittered(params: EncoderParams, scale: float, seed: int, prefix: str = "img.") -> EncoderParams:
    # breaks the exact symmetry of the copy: at f~ == f* every BadDist gradient is zero
    rng = np.random.default_rng([seed, 31])
    out = params.copy()
    for k, v in out.tensors.items():
        if k.startswith(prefix) and scale > 0:
            out.tensors[k] = v + (scale * v.std() * rng.standard_normal(v.shape)).astype(np.float32)
    return out


def train_baddist(clean: EncoderParams, subset: Dataset, config: AttackConfig,
                  trace: list | None = None) -> EncoderParams:
    """Fine-tune a copy of ``clean`` to keep clean embeddings and push triggered ones away.

    ``clean`` itself is never modified. Only the image tower is updated.
    """
    if len(subset) == 0:
        raise nc.DomainError("empty fine-tuning subset")
    if config.epochs == 0:
        return clean.copy()
    frozen = clean.constants()
    poisoned_all = config.trigger.apply(subset.images)
    c_all = image_embed(clean, subset.images, frozen).data
    b_all = image_embed(clean, poisoned_all, frozen).data
    model = _jittered(clean, config.jitter, config.seed)
    n = len(subset)
    bs = min(config.finetune_batch_size, n)
    velocity: dict = {}
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 23, epoch]).permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = np.sort(order[start:start + bs])
            leaves = {k: t for k, t in model.leaves().items() if k.startswith("img.")}
            weights = {**model.constants(), **leaves}
            c_prime = image_embed(model, subset.images[idx], weights)
            b_prime = image_embed(model, poisoned_all[idx], weights)
            e = BadDistEmbeddings(Tensor(c_all[idx]), c_prime, Tensor(b_all[idx]), b_prime)
            loss = baddist_loss(e, config.lambda1, config.lambda2)
            loss.backward()
            _check_finite(step, loss, leaves)
            model = sgd_step(model, leaves, config.finetune_lr, config.momentum, velocity)
            if trace is not None:
                trace.append({
                    "step": step, "loss": float(loss.data),
                    "clean_cos": float(np.mean((c_all[idx] * c_prime.data).sum(1))),
                    "poison_cos": float(np.mean((b_all[idx] * b_prime.data).sum(1))),
                })
            step += 1
    return model


def train_badencoder_lite(clean: EncoderParams, subset: Dataset, target_image, config: AttackConfig,
                          a1: float = 1.0, a2: float = 1.0, trace: list | None = None) -> EncoderParams:
    """Pull triggered embeddings onto the clean model's embedding of ``target_image``."""
    if len(subset) == 0:
        raise nc.DomainError("empty fine-tuning subset")
    target_image = np.asarray(target_image, dtype=np.float32)
    if target_image.shape != subset.images.shape[1:]:
        raise nc.ShapeError("target image shape does not match the dataset")
    if config.epochs == 0:
        return clean.copy()
    frozen = clean.constants()
    anchor = image_embed(clean, target_image, frozen).data[0]
    poisoned_all = config.trigger.apply(subset.images)
    clean_all = image_embed(clean, subset.images, frozen).data
    model = clean.copy()
    n = len(subset)
    bs = min(config.finetune_batch_size, n)
    velocity: dict = {}
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 29, epoch]).permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = np.sort(order[start:start + bs])
            leaves = {k: t for k, t in model.leaves().items() if k.startswith("img.")}
            weights = {**model.constants(), **leaves}
            pt = image_embed(model, poisoned_all[idx], weights)
            ct = image_embed(model, subset.images[idx], weights)
            loss = badencoder_lite_loss(pt, Tensor(anchor), ct, Tensor(clean_all[idx]), a1, a2)
            loss.backward()
            _check_finite(step, loss, leaves)
            model = sgd_step(model, leaves, config.finetune_lr, config.momentum, velocity)
            if trace is not None:
                trace.append({
                    "step": step, "loss": float(loss.data),
                    "clean_cos": float(np.mean((clean_all[idx] * ct.data).sum(1))),
                    "poison_cos": float(np.mean(pt.data @ anchor)),
                })
            step += 1
    return model
