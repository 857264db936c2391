"""Zero-shot classification and backdoor metrics (BA, BSR, untargeted accuracy)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ubl import numcore as nc
from ubl.data import Dataset, PromptSet
from ubl.model import EncoderParams, image_embed, text_embed
from ubl.triggers import TriggerSpec

EVAL_CHUNK = 256


@dataclass
class MetricsReport:
    BA: float | None = None
    BSR: float | None = None
    clean_acc: float | None = None
    poisoned_acc: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("BA", "BSR", "clean_acc", "poisoned_acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise nc.DomainError(f"{name}={v} is not a rate")

    @property
    def avg(self) -> float | None:
        if self.BA is None or self.BSR is None:
            return None
        return (self.BA + self.BSR) / 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["avg"] = self.avg
        return d


def class_prototypes(params: EncoderParams, prompts: PromptSet) -> np.ndarray:
    """Mean of each class's prompt embeddings, re-normalised; shape (K, h)."""
    protos = []
    for ps in prompts.prompts:
        m = text_embed(params, ps).data.mean(axis=0)
        protos.append(m / np.linalg.norm(m))
    return np.stack(protos)


def predict_from_embeddings(emb: np.ndarray, protos: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(np.atleast_2d(emb) @ protos.T, axis=1)


def embed_images(params: EncoderParams, images: np.ndarray) -> np.ndarray:
    chunks = [image_embed(params, images[i:i + EVAL_CHUNK]).data for i in range(0, len(images), EVAL_CHUNK)]
    return np.concatenate(chunks) if chunks else np.zeros((0, params.h), np.float32)


def predict(params: EncoderParams, images: np.ndarray, prompts: PromptSet,
            protos: np.ndarray | None = None) -> np.ndarray:
    protos = class_prototypes(params, prompts) if protos is None else protos
    return predict_from_embeddings(embed_images(params, np.asarray(images, np.float32)), protos)


def zero_shot_classify(params: EncoderParams, image, prompts: PromptSet) -> int:
    return int(predict(params, np.asarray(image)[None], prompts)[0])


def accuracy(params: EncoderParams, ds: Dataset, prompts: PromptSet, images=None) -> float:
    pred = predict(params, ds.images if images is None else images, prompts)
    return float(np.mean(pred == ds.classes))


def evaluate_targeted(params: EncoderParams, test: Dataset, trigger: TriggerSpec, target: int,
                      prompts: PromptSet, predictor=None) -> MetricsReport:
    """BA on clean images; BSR over triggered images whose true class is not the target."""
    predictor = predictor or (lambda ims: predict(params, ims, prompts))
    eligible = test.classes != target
    if not eligible.any():
        raise nc.DomainError("no test samples outside the target class; BSR undefined")
    clean_pred = predictor(test.images)
    trig_pred = predictor(trigger.apply(test.images[eligible]))
    ba = int(np.sum(clean_pred == test.classes)) / len(test)
    bsr = int(np.sum(trig_pred == target)) / int(eligible.sum())
    return MetricsReport(BA=ba, BSR=bsr)


def evaluate_untargeted(params: EncoderParams, test: Dataset, trigger: TriggerSpec,
                        prompts: PromptSet) -> MetricsReport:
    protos = class_prototypes(params, prompts)
    clean_pred = predict(params, test.images, prompts, protos)
    trig_pred = predict(params, trigger.apply(test.images), prompts, protos)
    n = len(test)
    return MetricsReport(clean_acc=int(np.sum(clean_pred == test.classes)) / n,
                         poisoned_acc=int(np.sum(trig_pred == test.classes)) / n)
