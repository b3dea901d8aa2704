"""Degradation operators and the data-fit energies used during restoration.

All three corruptions are linear maps of the clean image: masking for
inpainting, separable Lanczos-3 resampling for superresolution, channel
averaging for colorization.  The energy is the mean squared error between
the degraded candidate and the evidence (the table metrics are MSE-based;
an L1 or pyramid norm here would only change constants), optionally plus a
penalty on the squared latent norm.
"""

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from PIL import Image

from . import tensor as T
from .losses import reflect_index
from .tensor import ShapeError, Tape, TensorMap

LANCZOS_A = 3


@dataclass
class DegradationSpec:
    """Tagged corruption description defining the restoration energy."""

    kind: str                        # "inpaint" | "superres" | "colorize"
    mask: Optional[np.ndarray] = None
    factor: Optional[int] = None
    latent_penalty: float = 0.0

    def __post_init__(self):
        if self.kind not in ("inpaint", "superres", "colorize"):
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.latent_penalty < 0:
            raise ValueError("latent penalty must be >= 0")
        if self.kind == "inpaint":
            if self.mask is None:
                raise ValueError("inpainting needs a mask")
            vals = np.unique(self.mask)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise ValueError("mask entries must be exactly 0 or 1")
        if self.kind == "superres":
            if self.factor not in (2, 4, 8):
                raise ValueError(f"superres factor must be 2, 4 or 8, got {self.factor}")


# ---------------------------------------------------------------------------
# masks


def center_mask(h: int, w: int, hole_h: int, hole_w: int) -> np.ndarray:
    """Ones with a centered hole_h x hole_w block of zeros."""
    if hole_h > h or hole_w > w or hole_h < 0 or hole_w < 0:
        raise ValueError(f"hole {hole_h}x{hole_w} does not fit in {h}x{w}")
    m = np.ones((h, w), dtype=T.default_dtype())
    top, left = (h - hole_h) // 2, (w - hole_w) // 2
    m[top:top + hole_h, left:left + hole_w] = 0
    return m


def half_mask(h: int, w: int, side: str = "right") -> np.ndarray:
    """Ones with one half zeroed; the split sits at the floor midpoint."""
    m = np.ones((h, w), dtype=T.default_dtype())
    if side == "left":
        m[:, :w // 2] = 0
    elif side == "right":
        m[:, w // 2:] = 0
    elif side == "top":
        m[:h // 2, :] = 0
    elif side == "bottom":
        m[h // 2:, :] = 0
    else:
        raise ValueError(f"side must be left/right/top/bottom, got {side!r}")
    return m


def random_mask(h: int, w: int, missing_fraction: float, seed: int) -> np.ndarray:
    """Exactly round(fraction*h*w) zeros at seeded positions without replacement."""
    if not 0 <= missing_fraction <= 1:
        raise ValueError(f"fraction must be in [0, 1], got {missing_fraction}")
    k = int(np.rint(missing_fraction * h * w))
    rng = np.random.default_rng(seed)
    idx = rng.choice(h * w, size=k, replace=False)
    m = np.ones(h * w, dtype=T.default_dtype())
    m[idx] = 0
    return m.reshape(h, w)


def save_mask_png(mask: np.ndarray, path) -> None:
    """Single-channel PNG, 0 = missing, 255 = known."""
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(T.default_dtype())


# ---------------------------------------------------------------------------
# linear degradations


def _lanczos3(t: np.ndarray) -> np.ndarray:
    out = np.sinc(t) * np.sinc(t / LANCZOS_A)
    return np.where(np.abs(t) < LANCZOS_A, out, 0.0)


@lru_cache(maxsize=None)
def _lanczos_matrix(n: int, factor: int) -> np.ndarray:
    """(n/factor, n) antialiased Lanczos-3 operator, rows normalized to sum 1.

    Output pixel i is centered at source coordinate (i + 0.5)*factor - 0.5;
    taps are the kernel evaluated at the scaled offsets, folded back at the
    boundaries by mirroring.
    """
    out = n // factor
    m = np.zeros((out, n), dtype=np.float64)
    half = LANCZOS_A * factor
    for i in range(out):
        center = (i + 0.5) * factor - 0.5
        lo = int(math.floor(center)) - half + 1
        for j in range(lo, lo + 2 * half):
            wj = _lanczos3(np.asarray((j - center) / factor))
            m[i, reflect_index(j, n)] += float(wj)
    m /= m.sum(axis=1, keepdims=True)
    return m


def lanczos_down(x: TensorMap, factor: int, tape: Optional[Tape] = None) -> TensorMap:
    """Separable Lanczos-3 downsampling by an integer factor (1 = identity)."""
    h, w = x.shape[2], x.shape[3]
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if h % factor or w % factor:
        raise ShapeError(f"extents {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return x
    return T.separable_resample(x, _lanczos_matrix(h, factor),
                                _lanczos_matrix(w, factor), tape=tape)


def to_gray(x: TensorMap, tape: Optional[Tape] = None) -> TensorMap:
    """(r + g + b) / 3 as a single channel."""
    if x.shape[1] != 3:
        raise ShapeError(f"to_gray needs 3 channels, got {x.shape[1]}")
    return T.channel_mean(x, tape=tape)


def apply_degradation(x: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Produce the evidence y from a clean image batch (plain numpy, no tape)."""
    if spec.kind == "inpaint":
        return x * spec.mask[None, None].astype(x.dtype)
    if spec.kind == "superres":
        return lanczos_down(TensorMap(x), spec.factor).data
    return x.mean(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# energies


def energy(x: TensorMap, y: TensorMap, spec: DegradationSpec,
           latent_norm_sq: Optional[TensorMap] = None,
           tape: Optional[Tape] = None) -> TensorMap:
    """Data-fit energy E(x|y) plus latent_penalty * ||z||^2.

    inpaint: MSE over pixels with mask 1; superres: MSE between the
    Lanczos-downsampled candidate and y; colorize: MSE between the channel
    average and y.
    """
    n, c, h, w = x.shape
    if spec.kind == "inpaint":
        if spec.mask.shape != (h, w):
            raise ShapeError(f"mask {spec.mask.shape} does not match image {h}x{w}")
        if y.shape != x.shape:
            raise ShapeError(f"evidence shape {y.shape} != image shape {x.shape}")
        known = float(spec.mask.sum())
        if known == 0:
            warnings.warn("all-zero mask: inpainting energy is vacuous")
            fit = TensorMap(np.zeros((), dtype=x.dtype))
        else:
            m = TensorMap(np.broadcast_to(spec.mask.astype(x.dtype), x.shape))
            masked = T.mul(T.sub(x, y, tape=tape), m, tape=tape)
            sse = T.sum_all(T.square(masked, tape=tape), tape=tape)
            fit = T.mul_scalar(sse, 1.0 / (known * n * c), tape=tape)
    elif spec.kind == "superres":
        down = lanczos_down(x, spec.factor, tape=tape)
        if y.shape != down.shape:
            raise ShapeError(f"evidence shape {y.shape} != downsampled shape {down.shape}")
        fit = T.mean_all(T.square(T.sub(down, y, tape=tape), tape=tape), tape=tape)
    else:
        gray = to_gray(x, tape=tape)
        if y.shape != gray.shape:
            raise ShapeError(f"evidence shape {y.shape} != grayscale shape {gray.shape}")
        fit = T.mean_all(T.square(T.sub(gray, y, tape=tape), tape=tape), tape=tape)
    if spec.latent_penalty > 0 and latent_norm_sq is not None:
        fit = T.add(fit, T.mul_scalar(latent_norm_sq, spec.latent_penalty, tape=tape),
                    tape=tape)
    return fit
