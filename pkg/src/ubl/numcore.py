"""Dense tensors with reverse-mode gradients, 2-D FFT helpers and the BFMT format.

Only the operations the contrastive and embedding-distance losses need are
differentiable. Arrays are float32 unless a float64 array is passed in
explicitly (gradient checking promotes to float64).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Sequence

import numpy as np


class DomainError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class FormatError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype == np.float64 and isinstance(x, (np.ndarray, np.generic)):
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """An n-d array that optionally records how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- plumbing ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _child(self, data, parents, backward) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, True, tuple(parents), backward)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every grad-enabled leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        # release graph references held by intermediates
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other) -> "Tensor":
        return add(_wrap(other), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return a._child(a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return a._child(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a._child(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return a._child(a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    return a._child(a.data @ b.data, (a, b),
                    lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return a._child(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return a._child(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return a._child(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a._child(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return a._child(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a._child(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise unit normalisation of a 2-d tensor (or a vector)."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, x.dtype.type(eps))
    y = x / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return a._child(y, (a,), back)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity between rows of ``a`` (N×h) and ``b`` (M×h)."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def cosine_sim(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 1 or a.shape != b.shape or a.shape[0] < 1:
        raise ShapeError(f"cosine_sim needs equal-length vectors, got {a.shape} and {b.shape}")
    if not np.any(a.data) or not np.any(b.data):
        raise DomainError("cosine similarity of a zero vector")
    return reshape(cosine_matrix(reshape(a, (1, -1)), reshape(b, (1, -1))), ())


def rowwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """cos(a_i, b_i) for each row i; returns a length-N vector."""
    return tsum(mul(l2_normalize(a), l2_normalize(b)), axis=1)


def log_softmax_rows(m: Tensor, tau: float = 1.0) -> Tensor:
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    z = m.data / m.data.dtype.type(tau)
    z = z - z.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    soft = np.exp(out)

    def back(g):
        return ((g - soft * g.sum(axis=1, keepdims=True)) / tau,)

    return m._child(out, (m,), back)


def softmax_rows(m, tau: float = 1.0) -> Tensor:
    m = _wrap(m)
    if m.data.ndim != 2:
        raise ShapeError("softmax_rows needs a matrix")
    return exp(log_softmax_rows(m, tau))


# -- FFT ------------------------------------------------------------------

@dataclass(frozen=True)
class Spectrum:
    """Polar form of a 2-d DFT, DC at index (0, 0)."""

    amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.amplitude.shape != self.phase.shape or self.amplitude.ndim != 2:
            raise ShapeError("amplitude and phase must be equal-shaped matrices")

    @property
    def shape(self):
        return self.amplitude.shape

    def complex(self) -> np.ndarray:
        return self.amplitude * np.exp(1j * self.phase)


def fft2(image) -> Spectrum:
    x = image.data if isinstance(image, Tensor) else np.asarray(image)
    if x.ndim != 2 or min(x.shape) < 2:
        raise ShapeError(f"fft2 needs an H×W image with H, W >= 2, got {x.shape}")
    f = np.fft.fft2(x.astype(np.float64))
    return Spectrum(np.abs(f), np.angle(f))


def ifft2(s: Spectrum) -> Tensor:
    return Tensor(np.real(np.fft.ifft2(s.complex())).astype(np.float32))


def centered_window(shape: tuple[int, int], beta: float) -> np.ndarray:
    """Boolean mask (DC at (0,0) layout) of the low-frequency window of extent beta.

    The window is built around the DC-centred spectrum and has half-width
    floor(beta*n/2) per axis, so it is symmetric under k -> -k.
    """
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    bh, bw = int(math.floor(beta * h / 2)), int(math.floor(beta * w / 2))
    ch, cw = h // 2, w // 2
    mask[ch - bh:ch + bh + 1, cw - bw:cw + bw + 1] = True
    return np.fft.ifftshift(mask)


# -- gradient checking ----------------------------------------------------

def grad_check(loss_fn: Callable[[Sequence[Tensor]], Tensor], params: Sequence, epsilon: float = 1e-3) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` receives a list of Tensors and returns a scalar Tensor.
    Parameters are promoted to float64 for the check.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise DomainError("epsilon must lie in [1e-6, 1e-3]")
    values = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in params]

    def evaluate(arrays, track=False):
        ts = [Tensor(a.copy(), requires_grad=track) for a in arrays]
        out = loss_fn(ts)
        if not np.all(np.isfinite(out.data)):
            raise NumericError(f"non-finite loss {out.data}")
        return out, ts

    out, ts = evaluate(values, track=True)
    out.backward()
    worst = 0.0
    for k, t in enumerate(ts):
        analytic = t.grad if t.grad is not None else np.zeros_like(values[k])
        flat = values[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(evaluate(values)[0].data)
            flat[i] = orig - epsilon
            down = float(evaluate(values)[0].data)
            flat[i] = orig
            fd = (up - down) / (2 * epsilon)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - fd) / (abs(a) + abs(fd) + 1e-8))
    return worst


# -- BFMT -----------------------------------------------------------------

BFMT_MAGIC = b"BFMT"
BFMT_VERSION = 1


def write_bfmt(fh: BinaryIO, array) -> None:
    arr = np.ascontiguousarray(array.data if isinstance(array, Tensor) else array, dtype="<f4")
    fh.write(BFMT_MAGIC)
    fh.write(struct.pack("<II", BFMT_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated BFMT stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_bfmt(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != BFMT_MAGIC:
        raise FormatError("bad BFMT magic")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != BFMT_VERSION:
        raise FormatError(f"unsupported BFMT version {version}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)

