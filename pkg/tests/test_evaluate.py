import numpy as np
import pytest
from hypothesis import given, strategies as st

from ubl import numcore as nc
from ubl.attack import AttackConfig, train_badmatch
from ubl.data import Dataset, gen_synthetic_dataset, make_prompts
from ubl.evaluate import (MetricsReport, accuracy, class_prototypes, evaluate_targeted, evaluate_untargeted,
                          predict_from_embeddings, zero_shot_classify)
from ubl.model import init_params
from ubl.triggers import TriggerSpec


def test_prototypes_are_unit_rows(tiny_data):
    _, _, prompts = tiny_data
    p = init_params("conv-small", 32, 16, 64)
    protos = class_prototypes(p, prompts)
    assert protos.shape == (2, 16)
    np.testing.assert_allclose(np.linalg.norm(protos, axis=1), 1.0, atol=1e-6)


def test_prototype_embedding_wins():
    protos = np.eye(4)[:3]
    for c in range(3):
        assert predict_from_embeddings(protos[c], protos)[0] == c


def test_ties_go_to_lowest_index():
    assert predict_from_embeddings(np.zeros(4), np.eye(4)[:3])[0] == 0
    protos = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert predict_from_embeddings(np.array([1.0, 0.0]), protos)[0] == 0


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_argmax_invariant_under_positive_scaling(seed, s):
    rng = np.random.default_rng(seed)
    emb, protos = rng.normal(size=(1, 8)), rng.normal(size=(5, 8))
    assert predict_from_embeddings(emb, protos)[0] == predict_from_embeddings(emb * s, protos)[0]


def test_constant_predictor(tiny_data):
    _, test, prompts = tiny_data
    p = init_params("conv-small", 32, 16, 64)
    r = evaluate_targeted(p, test, TriggerSpec.white_patch(), 1, prompts,
                          predictor=lambda ims: np.ones(len(ims), dtype=int))
    assert r.BSR == 1.0 and r.BA == pytest.approx(0.5)
    assert r.avg == (r.BA + r.BSR) / 2


def test_trigger_ignoring_model_has_zero_bsr(tiny_data):
    _, test, prompts = tiny_data
    r = evaluate_targeted(None, test, TriggerSpec.white_patch(), 1, prompts,
                          predictor=lambda ims: np.zeros(len(ims), dtype=int))
    assert r.BSR == 0.0


def test_empty_eligible_set(tiny_data):
    _, test, prompts = tiny_data
    only_target = test.subset(np.flatnonzero(test.classes == 1))
    with pytest.raises(nc.DomainError):
        evaluate_targeted(None, only_target, TriggerSpec.white_patch(), 1, prompts, predictor=lambda x: x)


def test_identity_trigger_keeps_accuracy(tiny_data):
    _, test, prompts = tiny_data
    p = init_params("mlp-small", 32, 16, 64, seed=4)
    r = evaluate_untargeted(p, test, TriggerSpec.default_fourier(alpha=0.0), prompts)
    assert r.poisoned_acc == r.clean_acc
    assert r.clean_acc == accuracy(p, test, prompts)
    assert zero_shot_classify(p, test.images[0], prompts) in (0, 1)


def test_shuffled_label_floor():
    """A model trained on image labels shuffled against the images sits near chance."""
    train = gen_synthetic_dataset(4, 40, 32, seed=0, split="train")
    test = gen_synthetic_dataset(4, 40, 32, seed=0, split="test")
    perm = np.random.default_rng(0).permutation(len(train))
    shuffled = Dataset(train.images, [train.tokens[i] for i in perm], train.image_labels[perm],
                       train.text_labels[perm], train.class_names, "train", 0)
    model = train_badmatch(init_params("conv-small", 32, 16, 64), shuffled,
                           AttackConfig(p=0.0, iterations=300, batch_size=16))
    acc = accuracy(model, test, make_prompts(test.class_names))
    assert abs(acc - 0.25) <= 0.15


def test_report_validates_rates():
    with pytest.raises(nc.DomainError):
        MetricsReport(BA=1.2)
    assert MetricsReport(BA=0.5).avg is None
    assert MetricsReport(BA=0.4, BSR=0.8).to_dict()["avg"] == pytest.approx(0.6)
