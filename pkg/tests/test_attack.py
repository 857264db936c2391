from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ubl import numcore as nc
from ubl.attack import (AttackConfig, BadDistEmbeddings, PredictiveMatrix, TrainingError, badencoder_lite_loss,
                        badmatch_poison_batch, baddist_loss, build_semantic_matrix, contrastive_nll,
                        medclip_loss, predictive_matrix, semantic_matching_loss, train_baddist,
                        train_badmatch)
from ubl.data import gen_synthetic_dataset
from ubl.model import init_params
from ubl.numcore import Tensor

_DS = gen_synthetic_dataset(2, 16, 32, seed=0, split="train")


def cosine_oracle(I, T):
    """Direct O(N^2 K) double loop."""
    n, k = I.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            dot = sum(float(I[i, c]) * float(T[j, c]) for c in range(k))
            ni = sum(float(I[i, c]) ** 2 for c in range(k)) ** 0.5
            nt = sum(float(T[j, c]) ** 2 for c in range(k)) ** 0.5
            out[i, j] = dot / (ni * nt)
    return out


def label_batch(draw, n, k, multi):
    rows = []
    for _ in range(n):
        if multi:
            bits = draw(st.lists(st.integers(0, 1), min_size=k, max_size=k).filter(any))
        else:
            c = draw(st.integers(0, k - 1))
            bits = [int(i == c) for i in range(k)]
        rows.append(bits)
    return np.array(rows, dtype=np.uint8)


@st.composite
def label_pairs(draw):
    n, k, multi = draw(st.integers(1, 16)), draw(st.integers(1, 8)), draw(st.booleans())
    return label_batch(draw, n, k, multi), label_batch(draw, n, k, multi)


@given(label_pairs())
def test_semantic_matrix_matches_oracle(pair):
    I, T = pair
    sm = build_semantic_matrix(I, T).values
    assert sm.shape == (len(I), len(I))
    np.testing.assert_allclose(sm, cosine_oracle(I, T), rtol=0, atol=1e-15)
    assert sm.min() >= 0 and sm.max() <= 1 + 1e-15


def test_semantic_matrix_examples():
    I = np.array([[1, 0], [0, 1]])
    np.testing.assert_array_equal(build_semantic_matrix(I, I).values, np.eye(2))
    I = np.array([[1, 1], [1, 0]])
    T = np.array([[1, 0], [1, 1]])
    assert build_semantic_matrix(I, T).values[0, 0] == pytest.approx(1 / np.sqrt(2))
    with pytest.raises(nc.DomainError):
        build_semantic_matrix(np.array([[0, 0]]), np.array([[1, 0]]))
    with pytest.raises(nc.ShapeError):
        build_semantic_matrix(np.ones((2, 2)), np.ones((3, 2)))


def test_single_pair_losses_vanish():
    pm = predictive_matrix(Tensor([[0.3, 0.1]]), Tensor([[0.2, 0.5]]))
    nll = contrastive_nll(pm)
    np.testing.assert_allclose(nll.data, [[0.0]], atol=1e-7)
    assert semantic_matching_loss(np.ones((1, 1)), nll).item() == pytest.approx(0.0, abs=1e-7)


def test_contrastive_nll_closed_form():
    logits = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    nll = contrastive_nll(PredictiveMatrix(logits, tau=1.0)).data
    np.testing.assert_allclose(nll[0], [np.log(1 + np.e ** -1), 1 + np.log(1 + np.e ** -1)], atol=1e-6)


def test_identity_sm_is_uniform_weighted_diagonal():
    # SM = I gives soft labels softmax(e_i): diagonal e/(e+n-1)
    rng = np.random.default_rng(0)
    nll = Tensor(rng.uniform(0, 2, size=(3, 3)))
    soft = np.full((3, 3), 1.0) + (np.e - 1) * np.eye(3)
    soft /= soft.sum(1, keepdims=True)
    assert semantic_matching_loss(np.eye(3), nll).item() == pytest.approx((soft * nll.data).sum() / 3, rel=1e-6)


def _unit(rng, n, h):
    x = rng.normal(size=(n, h))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_baddist_initial_identity():
    rng = np.random.default_rng(3)
    c, b = _unit(rng, 8, 16), _unit(rng, 8, 16)
    e = BadDistEmbeddings(Tensor(c), Tensor(c.copy()), Tensor(b), Tensor(b.copy()))
    assert baddist_loss(e, 5.0, 1.0).item() == pytest.approx(-4.0, abs=1e-6)


@given(st.floats(0, 10), st.floats(0, 10), st.integers(0, 2**16))
def test_baddist_loss_bounds(l1, l2, seed):
    rng = np.random.default_rng(seed)
    v = [Tensor(_unit(rng, 4, 6)) for _ in range(4)]
    loss = baddist_loss(BadDistEmbeddings(*v), l1, l2).item()
    assert -l1 - l2 - 1e-5 <= loss <= l1 + l2 + 1e-5


@pytest.mark.parametrize("n,h,k", [(2, 3, 2), (5, 8, 3), (8, 16, 4)])
def test_loss_gradients(n, h, k):
    rng = np.random.default_rng(n * h)
    I = np.eye(k)[rng.integers(0, k, n)]
    T = np.eye(k)[rng.integers(0, k, n)]
    img, txt = rng.normal(size=(n, h)), rng.normal(size=(n, h))
    sm = build_semantic_matrix(I, T)

    checks = [
        (lambda ts: nc.tmean(contrastive_nll(predictive_matrix(ts[0], ts[1], 0.5))), [img, txt]),
        (lambda ts: semantic_matching_loss(sm, contrastive_nll(predictive_matrix(ts[0], ts[1], 0.5))), [img, txt]),
        (lambda ts: medclip_loss(ts[0], ts[1], I, T, 0.5, symmetric=True), [img, txt]),
        (lambda ts: baddist_loss(BadDistEmbeddings(*ts)), [rng.normal(size=(n, h)) for _ in range(4)]),
        (lambda ts: badencoder_lite_loss(ts[0], ts[1], ts[2], ts[3]),
         [rng.normal(size=(n, h)), rng.normal(size=h), rng.normal(size=(n, h)), rng.normal(size=(n, h))]),
    ]
    for fn, params in checks:
        assert nc.grad_check(fn, params) < 1e-3


@given(st.floats(0, 1), st.integers(0, 1000))
def test_poisoning_marks_and_relabels(p, seed):
    ds = _DS
    cfg = AttackConfig(p=p, target_class=1)
    out, I, mask = badmatch_poison_batch(ds, cfg, np.random.default_rng(seed))
    assert np.all(I[mask] == [0, 1])
    assert np.array_equal(out.images[~mask], ds.images[~mask])
    assert np.array_equal(out.text_labels, ds.text_labels)
    if p == 0:
        assert not mask.any()
    if p == 1:
        assert mask.all()


def test_poison_rate_is_bernoulli():
    cfg = AttackConfig(p=0.2)
    rate = np.mean([badmatch_poison_batch(_DS, cfg, np.random.default_rng(s))[2].mean() for s in range(300)])
    assert abs(rate - 0.2) < 0.02


@pytest.mark.parametrize("kw", [dict(p=1.5), dict(tau=0), dict(lambda1=-1), dict(batch_size=0), dict(lr=0)])
def test_config_validation(kw):
    with pytest.raises(nc.DomainError):
        AttackConfig(**kw)


def test_resume_is_exact():
    p0 = init_params("conv-small", 32, 16, 64, seed=1)
    cfg = AttackConfig(p=0.3, iterations=12, batch_size=8, seed=7)
    full = train_badmatch(p0, _DS, cfg)
    half = train_badmatch(p0, _DS, replace(cfg, iterations=6))
    resumed = train_badmatch(half, _DS, cfg, start_step=6)
    assert full.digest() == resumed.digest()


def test_non_finite_loss_raises():
    p0 = init_params("conv-small", 32, 16, 64, seed=1)
    p0.tensors["img.head.w"][:] = np.nan
    with pytest.raises(nc.NumericError):
        train_badmatch(p0, _DS, AttackConfig(iterations=2, batch_size=4))
    err = TrainingError(3, float("nan"), {"w": 1.0})
    assert "step 3" in str(err)


def test_baddist_leaves_clean_model_untouched():
    p0 = init_params("conv-small", 32, 16, 64, seed=2)
    before = p0.digest()
    trace = []
    m = train_baddist(p0, _DS, AttackConfig(epochs=3, finetune_batch_size=8), trace=trace)
    assert p0.digest() == before and m.digest() != before
    assert all(np.array_equal(m.tensors[k], p0.tensors[k]) for k in p0.tensors if k.startswith("txt."))
    assert trace[-1]["poison_cos"] < trace[0]["poison_cos"]
    assert train_baddist(p0, _DS, AttackConfig(epochs=0)).digest() == before
