import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ubl import numcore as nc
from ubl.data import gen_synthetic_dataset
from ubl.triggers import (FourierSpec, PatchSpec, TriggerSpec, apply_fourier, apply_patch, blend_spectra,
                          procedural_texture, psnr)

images = arrays(np.float32, (32, 32), elements=st.floats(0, 255, width=32))


@pytest.mark.parametrize("spec,corner", [(TriggerSpec.white_patch(), (23, 11)),
                                         (TriggerSpec.black_patch(), (23, 23))])
def test_patch_placement(spec, corner):
    x = np.full((32, 32), 100.0, np.float32)
    y = spec.apply(x)
    r, c = corner
    assert np.all(y[r:r + 9, c:c + 9] == spec.patch.value)
    assert np.sum(y != x) == 81


@given(images, st.integers(1, 12), st.sampled_from([0.0, 245.0]))
def test_patch_changes_at_most_side_squared(x, side, value):
    y = apply_patch(x, TriggerSpec("patch", patch=PatchSpec(value, side)))
    assert np.sum(y != x) <= side * side
    assert np.sum(y == np.float32(value)) >= side * side


def test_patch_must_fit():
    with pytest.raises(nc.DomainError):
        apply_patch(np.zeros((8, 8)), TriggerSpec("patch", patch=PatchSpec(245.0, 9)))
    with pytest.raises(nc.DomainError):
        apply_fourier(np.zeros((8, 8)), TriggerSpec.white_patch())


@given(images)
def test_fourier_alpha_zero_is_identity(x):
    y = TriggerSpec.default_fourier(alpha=0.0).apply(x)
    np.testing.assert_allclose(y, x, atol=1e-4)


@given(images)
def test_fourier_only_touches_window(x):
    trig = procedural_texture(x.shape)
    out = blend_spectra(x, trig, 0.2, 0.2)
    win = nc.centered_window(x.shape, 0.2)
    a_in, a_out = nc.fft2(x).amplitude, nc.fft2(out).amplitude
    scale = max(1.0, float(a_in.max()))
    assert np.max(np.abs(a_in[~win] - a_out[~win])) <= 1e-4 * scale
    expected = 0.8 * a_in[win] + 0.2 * nc.fft2(trig).amplitude[win]
    np.testing.assert_allclose(a_out[win], expected, atol=1e-4 * scale)


@given(images)
def test_triggers_are_pure_and_in_range(x):
    for spec in (TriggerSpec.white_patch(), TriggerSpec.default_fourier()):
        a, b = spec.apply(x), spec.apply(x.copy())
        assert a.tobytes() == b.tobytes()
        assert a.shape == x.shape and a.min() >= 0 and a.max() <= 255


def test_fourier_psnr_on_synthetic_images():
    ds = gen_synthetic_dataset(2, 10, 64, seed=0, split="test")
    poisoned = TriggerSpec.default_fourier().apply(ds.images)
    assert min(psnr(p, c) for p, c in zip(poisoned, ds.images)) >= 25.0


def test_spec_json_roundtrip():
    for spec in (TriggerSpec.white_patch(), TriggerSpec.black_patch(), TriggerSpec.default_fourier()):
        assert TriggerSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        TriggerSpec("fourier", fourier=FourierSpec(trigger_image=np.zeros((4, 4)))).to_dict()
    with pytest.raises(nc.DomainError):
        TriggerSpec.from_dict({"kind": "blend"})


def test_explicit_trigger_image_shape_checked():
    spec = TriggerSpec("fourier", fourier=FourierSpec(trigger_image=np.zeros((8, 8))))
    with pytest.raises(nc.ShapeError):
        spec.apply(np.zeros((16, 16)))


def test_psnr_identity():
    assert psnr(np.ones(4), np.ones(4)) == float("inf")
