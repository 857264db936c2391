import numpy as np
import pytest

from ubl import numcore as nc
from ubl.data import IntegrityError
from ubl.model import (ARCHITECTURES, Checkpoint, encode_image, encode_text, image_embed, init_params,
                       load_checkpoint, param_shapes, save_checkpoint, text_embed)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_embeddings_are_unit_norm(arch, rng):
    p = init_params(arch, 32, 16, 64, seed=3)
    ims = rng.uniform(0, 255, size=(5, 32, 32))
    e = image_embed(p, ims).data
    assert e.shape == (5, 16)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)
    t = text_embed(p, [(1, 2, 3), (40,), (5, 5, 9)]).data
    np.testing.assert_allclose(np.linalg.norm(t, axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(encode_image(p, ims[0]), e[0], atol=1e-6)
    np.testing.assert_allclose(encode_text(p, (1, 2, 3)), t[0], atol=1e-6)


def test_init_is_seeded():
    a, b, c = (init_params("conv-small", seed=s) for s in (1, 1, 2))
    assert a.digest() == b.digest() != c.digest()


def test_bad_inputs():
    p = init_params("mlp-small", 32, 8, 64)
    with pytest.raises(nc.ShapeError):
        image_embed(p, np.zeros((2, 16, 16)))
    with pytest.raises(nc.DomainError):
        text_embed(p, [(70,)])
    with pytest.raises(nc.DomainError):
        text_embed(p, [()])
    with pytest.raises(ValueError):
        param_shapes("resnet", 64, 64, 64)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_checkpoint_roundtrip_bit_exact(arch, tmp_path):
    p = init_params(arch, 32, 16, 64, seed=9)
    save_checkpoint(tmp_path / "m.ckpt", Checkpoint(p, "abc", 4, 17, {"role": "x"}))
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert (back.config_digest, back.seed, back.step, back.extra) == ("abc", 4, 17, {"role": "x"})
    for k, v in p.tensors.items():
        assert back.params.tensors[k].tobytes() == v.tobytes()
    save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_corruption(tmp_path):
    p = init_params("conv-small", 32, 16, 64)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Checkpoint(p))
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-10])
    with pytest.raises(nc.FormatError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "tail.ckpt").write_bytes(raw + b"x")
    with pytest.raises(nc.FormatError):
        load_checkpoint(tmp_path / "tail.ckpt")
    (tmp_path / "arch.ckpt").write_bytes(raw.replace(b'"conv-small"', b'"mlp-small"', 1))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "arch.ckpt")
    (tmp_path / "hdr.ckpt").write_bytes(b"{not json\n" + raw)
    with pytest.raises(nc.FormatError):
        load_checkpoint(tmp_path / "hdr.ckpt")
