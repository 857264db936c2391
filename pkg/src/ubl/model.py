"""Toy image/text encoders sharing a unit-norm embedding space, plus checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ubl import numcore as nc
from ubl.data import IntegrityError
from ubl.numcore import FormatError, Tensor

ARCHITECTURES = ("conv-small", "mlp-small")
FORMAT_VERSION = 1

CELL = 8  # conv-small kernel == stride
CONV_CHANNELS = 16
MLP_HIDDEN = 128
TEXT_DIM = 32

# fixed input standardisation, roughly the synthetic pixel statistics
PIXEL_MEAN = 64.0
PIXEL_STD = 32.0


def param_shapes(arch: str, image_size: int, h: int, vocab: int) -> dict[str, tuple[int, ...]]:
    """Declared parameter table, in serialization order."""
    if arch == "conv-small":
        if image_size % CELL:
            raise ValueError(f"conv-small needs an image size divisible by {CELL}")
        cells = (image_size // CELL) ** 2
        img = {
            "img.conv.w": (CELL * CELL, CONV_CHANNELS),
            "img.conv.b": (CONV_CHANNELS,),
            "img.head.w": (cells * CONV_CHANNELS, h),
            "img.head.b": (h,),
        }
    elif arch == "mlp-small":
        img = {
            "img.fc1.w": (image_size * image_size, MLP_HIDDEN),
            "img.fc1.b": (MLP_HIDDEN,),
            "img.head.w": (MLP_HIDDEN, h),
            "img.head.b": (h,),
        }
    else:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    txt = {
        "txt.embed": (vocab, TEXT_DIM),
        "txt.head.w": (TEXT_DIM, h),
        "txt.head.b": (h,),
    }
    return {**img, **txt}


@dataclass
class EncoderParams:
    arch: str
    image_size: int
    h: int
    vocab: int
    tensors: dict[str, np.ndarray]
    version: int = FORMAT_VERSION

    def copy(self) -> "EncoderParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.tensors.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.tensors.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.tensors.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def init_params(arch: str = "conv-small", image_size: int = 64, h: int = 64, vocab: int = 64,
                seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    shapes = param_shapes(arch, image_size, h, vocab)
    tensors = {}
    fan_in = None
    for name, shape in shapes.items():
        if name == "txt.embed":
            bound = 1.0
        elif name.endswith(".w"):
            fan_in = shape[0]
            bound = 1.0 / math.sqrt(fan_in)
        else:
            bound = 1.0 / math.sqrt(fan_in)  # bias follows its weight
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return EncoderParams(arch, image_size, h, vocab, tensors)


def _prep_images(images, size: int) -> np.ndarray:
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (size, size):
        raise nc.ShapeError(f"expected images of shape {size}x{size}, got {x.shape[1:]}")
    return (x - np.float32(PIXEL_MEAN)) / np.float32(PIXEL_STD)


def _patches(x: np.ndarray) -> np.ndarray:
    n, s, _ = x.shape
    g = s // CELL
    return (x.reshape(n, g, CELL, g, CELL).transpose(0, 1, 3, 2, 4)
            .reshape(n * g * g, CELL * CELL))


def conv_features(w: dict[str, Tensor], x: np.ndarray) -> Tensor:
    """Per-cell ReLU features of conv-small, shape (N, cells*channels)."""
    n = x.shape[0]
    f = nc.relu(nc.matmul(Tensor(_patches(x)), w["img.conv.w"]) + w["img.conv.b"])
    return nc.reshape(f, (n, -1))


def image_embed(params: EncoderParams, images, weights: dict[str, Tensor] | None = None,
                normalize: bool = True) -> Tensor:
    """Batch image encoder: (N, S, S) pixels in [0, 255] -> (N, h)."""
    w = weights if weights is not None else params.constants()
    x = _prep_images(images, params.image_size)
    if params.arch == "conv-small":
        hidden = conv_features(w, x)
    else:
        flat = Tensor(x.reshape(x.shape[0], -1))
        hidden = nc.relu(nc.matmul(flat, w["img.fc1.w"]) + w["img.fc1.b"])
    z = nc.matmul(hidden, w["img.head.w"]) + w["img.head.b"]
    return nc.l2_normalize(z) if normalize else z


def pooling_matrix(token_lists, vocab: int, dtype=np.float32) -> np.ndarray:
    pool = np.zeros((len(token_lists), vocab), dtype=dtype)
    for i, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise nc.DomainError("empty token sequence")
        for t in toks:
            if not 0 <= t < vocab:
                raise nc.DomainError(f"token id {t} outside vocabulary of size {vocab}")
            pool[i, t] += 1.0
        pool[i] /= len(toks)
    return pool


def text_embed(params: EncoderParams, token_lists, weights: dict[str, Tensor] | None = None) -> Tensor:
    """Mean-pooled token embeddings through an affine head -> (N, h)."""
    w = weights if weights is not None else params.constants()
    pool = Tensor(pooling_matrix(token_lists, params.vocab, w["txt.embed"].data.dtype))
    z = nc.matmul(nc.matmul(pool, w["txt.embed"]), w["txt.head.w"]) + w["txt.head.b"]
    return nc.l2_normalize(z)


def encode_image(params: EncoderParams, image) -> np.ndarray:
    x = np.asarray(image.data if isinstance(image, Tensor) else image)
    if x.ndim != 2:
        raise nc.ShapeError(f"encode_image takes a single H×W image, got {x.shape}")
    return image_embed(params, x).data[0]


def encode_text(params: EncoderParams, tokens) -> np.ndarray:
    return text_embed(params, [list(tokens)]).data[0]


def sgd_step(params: EncoderParams, leaves: dict[str, Tensor], lr: float,
             momentum: float = 0.0, velocity: dict | None = None,
             frozen: tuple[str, ...] = ()) -> EncoderParams:
    """Return updated params; ``velocity`` is mutated when momentum > 0."""
    lr32 = np.float32(lr)
    new = {}
    for k, v in params.tensors.items():
        g = leaves[k].grad if k in leaves else None
        if g is None or k.startswith(frozen):
            new[k] = v
            continue
        g = g.astype(np.float32, copy=False)
        if momentum:
            buf = velocity.get(k)
            buf = g if buf is None else np.float32(momentum) * buf + g
            velocity[k] = buf
            g = buf
        new[k] = v - lr32 * g
    return replace(params, tensors=new)


# -- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    params: EncoderParams
    config_digest: str = ""
    seed: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    p = ckpt.params
    header = {
        "format": "ubl-checkpoint",
        "version": p.version,
        "architecture": p.arch,
        "image_size": p.image_size,
        "h": p.h,
        "V": p.vocab,
        "seed": ckpt.seed,
        "step": ckpt.step,
        "config_digest": ckpt.config_digest,
        "extra": ckpt.extra,
        "tensors": [[k, list(v.shape)] for k, v in p.tensors.items()],
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for v in p.tensors.values():
        nc.write_bfmt(buf, v)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("checkpoint header is not terminated")
    try:
        header = json.loads(raw[:nl])
        arch, size, h, vocab = header["architecture"], header["image_size"], header["h"], header["V"]
        table = [(name, tuple(shape)) for name, shape in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')}")
    try:
        declared = param_shapes(arch, size, h, vocab)
    except ValueError as exc:
        raise IntegrityError(str(exc)) from exc
    if table != list(declared.items()):
        raise IntegrityError("shape table does not match the declared architecture")
    fh = io.BytesIO(raw[nl + 1:])
    tensors = {}
    for name, shape in table:
        arr = nc.read_bfmt(fh)
        if arr.shape != shape:
            raise IntegrityError(f"payload for {name} has shape {arr.shape}, expected {shape}")
        tensors[name] = arr
    if fh.read(1):
        raise FormatError("trailing bytes after the last tensor")
    params = EncoderParams(arch, size, h, vocab, tensors)
    return Checkpoint(params, header.get("config_digest", ""), header.get("seed", 0),
                      header.get("step", 0), header.get("extra", {}))
