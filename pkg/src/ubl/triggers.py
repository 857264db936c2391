"""Patch and Fourier-amplitude triggers.

Both triggers are pure functions of ``(image, spec)``. The Fourier trigger
keeps the clean image's phase and convexly blends amplitudes inside a
DC-centred low-frequency window:

    A' = (1 - alpha) * A_image + alpha * A_trigger   (inside the window)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ubl import numcore as nc

ANCHORS = ("bottom-center", "bottom-right", "custom")

# default trigger texture sits near the synthetic background level
TEXTURE_MEAN = 64.0
TEXTURE_SWING = 64.0


@dataclass(frozen=True)
class PatchSpec:
    value: float = 245.0
    side: int = 9
    anchor: str = "bottom-center"
    row: int | None = None
    col: int | None = None

    def origin(self, shape: tuple[int, int]) -> tuple[int, int]:
        h, w = shape
        if self.anchor == "bottom-center":
            return h - self.side, (w - self.side) // 2
        if self.anchor == "bottom-right":
            return h - self.side, w - self.side
        if self.anchor == "custom":
            if self.row is None or self.col is None:
                raise nc.DomainError("custom anchor needs row and col")
            return self.row, self.col
        raise nc.DomainError(f"unknown anchor {self.anchor!r}")


@dataclass(frozen=True)
class FourierSpec:
    alpha: float = 0.2
    beta: float = 0.2
    trigger_seed: int = 139
    trigger_image: np.ndarray | None = field(default=None, compare=False, repr=False)

    def image_for(self, shape: tuple[int, int]) -> np.ndarray:
        if self.trigger_image is not None:
            return np.asarray(self.trigger_image, dtype=np.float32)
        return procedural_texture(shape, self.trigger_seed)


@dataclass(frozen=True)
class TriggerSpec:
    kind: str
    patch: PatchSpec | None = None
    fourier: FourierSpec | None = None

    def __post_init__(self):
        if self.kind == "patch" and self.patch is None:
            object.__setattr__(self, "patch", PatchSpec())
        elif self.kind == "fourier" and self.fourier is None:
            object.__setattr__(self, "fourier", FourierSpec())
        elif self.kind not in ("patch", "fourier"):
            raise nc.DomainError(f"unknown trigger kind {self.kind!r}")

    @classmethod
    def white_patch(cls, side: int = 9) -> "TriggerSpec":
        return cls("patch", patch=PatchSpec(245.0, side, "bottom-center"))

    @classmethod
    def black_patch(cls, side: int = 9) -> "TriggerSpec":
        return cls("patch", patch=PatchSpec(0.0, side, "bottom-right"))

    @classmethod
    def default_fourier(cls, alpha: float = 0.2, beta: float = 0.2) -> "TriggerSpec":
        return cls("fourier", fourier=FourierSpec(alpha, beta))

    def to_dict(self) -> dict:
        if self.kind == "patch":
            p = self.patch
            d = {"value": p.value, "side": p.side, "anchor": p.anchor}
            if p.anchor == "custom":
                d.update(row=p.row, col=p.col)
            return {"kind": "patch", "patch": d}
        f = self.fourier
        if f.trigger_image is not None:
            raise ValueError("explicit trigger images are not JSON-serializable; use trigger_seed")
        return {"kind": "fourier", "fourier": {"alpha": f.alpha, "beta": f.beta, "trigger_seed": f.trigger_seed}}

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        kind = d["kind"]
        if kind == "patch":
            return cls("patch", patch=PatchSpec(**d.get("patch", {})))
        if kind == "fourier":
            return cls("fourier", fourier=FourierSpec(**d.get("fourier", {})))
        raise nc.DomainError(f"unknown trigger kind {kind!r}")

    def apply(self, images: np.ndarray) -> np.ndarray:
        """Apply to one H×W image or a stack of them."""
        fn = apply_patch if self.kind == "patch" else apply_fourier
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 2:
            return fn(x, self)
        return np.stack([fn(im, self) for im in x]) if len(x) else x.copy()


@lru_cache(maxsize=8)
def _texture(shape: tuple[int, int], seed: int) -> np.ndarray:
    # a few low-frequency plane waves with seeded frequencies and phases
    h, w = shape
    rng = np.random.default_rng([seed, 2718])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tex = np.zeros(shape)
    for _ in range(6):
        ky, kx = rng.integers(-3, 4, size=2)
        if ky == 0 and kx == 0:
            kx = 1
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.cos(2 * np.pi * (ky * yy / h + kx * xx / w) + phase)
    tex = (tex - tex.mean()) / np.abs(tex - tex.mean()).max()
    out = np.clip(TEXTURE_MEAN + TEXTURE_SWING * tex, 0, 255).astype(np.float32)
    out.setflags(write=False)
    return out


def procedural_texture(shape: tuple[int, int], seed: int = 139) -> np.ndarray:
    """Seeded smooth texture used as the default Fourier trigger image."""
    return _texture(tuple(shape), int(seed))


def apply_patch(image, spec: TriggerSpec) -> np.ndarray:
    if spec.kind != "patch":
        raise nc.DomainError("apply_patch needs a patch trigger")
    p = spec.patch
    x = np.array(image, dtype=np.float32)
    r, c = p.origin(x.shape)
    if p.side < 1 or r < 0 or c < 0 or r + p.side > x.shape[0] or c + p.side > x.shape[1]:
        raise nc.DomainError(f"patch of side {p.side} at ({r}, {c}) does not fit in {x.shape}")
    x[r:r + p.side, c:c + p.side] = np.float32(p.value)
    return x


def blend_spectra(image: np.ndarray, trigger: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Unclipped real image whose low-frequency amplitude is blended toward ``trigger``."""
    src = nc.fft2(image)
    trg = nc.fft2(trigger)
    win = nc.centered_window(src.shape, beta)
    amp = src.amplitude.copy()
    amp[win] = (1 - alpha) * src.amplitude[win] + alpha * trg.amplitude[win]
    return np.real(np.fft.ifft2(amp * np.exp(1j * src.phase)))


def apply_fourier(image, spec: TriggerSpec) -> np.ndarray:
    if spec.kind != "fourier":
        raise nc.DomainError("apply_fourier needs a Fourier trigger")
    f = spec.fourier
    x = np.asarray(image, dtype=np.float32)
    trig = f.image_for(x.shape)
    if trig.shape != x.shape:
        raise nc.ShapeError(f"trigger image {trig.shape} does not match image {x.shape}")
    if not (0.0 <= f.alpha <= 1.0) or not (0.0 < f.beta <= 1.0):
        raise nc.DomainError("alpha must be in [0, 1] and beta in (0, 1]")
    out = blend_spectra(x, trig, f.alpha, f.beta)
    return np.clip(out, 0, 255).astype(np.float32)


def psnr(a, b, peak: float = 255.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(peak ** 2 / mse)
