"""Laplacian pyramid and the pyramid-L1 + MSE training norm.

The pyramid follows the classic construction: separable 5-tap binomial
smoothing ([1,4,6,4,1]/16) with mirror boundary handling, subsampling at
even indices, band-pass levels as the difference against the re-upsampled
coarse image.  Both the smoothing and the upsampling are linear operators,
so the whole loss differentiates through ``separable_resample``.

Per-level L1 uses the mean (not the sum) so the loss magnitude does not
depend on resolution; level 0 is the finest scale and level j carries
weight 2^(-2j).
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tape, TensorMap

BINOMIAL5 = (1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0)


def default_levels(h: int, w: int) -> int:
    """floor(log2(min extent)) - 2, clamped to at least one level."""
    return max(1, int(math.floor(math.log2(min(h, w)))) - 2)


@dataclass(frozen=True)
class PyramidSpec:
    """Number of levels of the binomial pyramid; kernel and boundary are fixed."""

    levels: int
    kernel: tuple = BINOMIAL5
    boundary: str = "reflect"

    def validate_for(self, h: int, w: int) -> None:
        if self.levels < 1:
            raise ValueError(f"pyramid needs >= 1 level, got {self.levels}")
        max_j = int(math.floor(math.log2(min(h, w))))
        if self.levels > max_j:
            raise ValueError(
                f"{self.levels} levels too deep for a {h}x{w} image (max {max_j})")


def reflect_index(t: int, n: int) -> int:
    """Mirror an out-of-range index about the edges (no edge repeat)."""
    if n == 1:
        return 0
    while t < 0 or t >= n:
        t = -t if t < 0 else 2 * n - 2 - t
    return t


@lru_cache(maxsize=None)
def _smooth_subsample_matrix(n: int) -> np.ndarray:
    """(ceil(n/2), n) operator: binomial smoothing then stride-2 pick at even indices."""
    out = math.ceil(n / 2)
    m = np.zeros((out, n), dtype=np.float64)
    for i in range(out):
        center = 2 * i
        for k, wk in enumerate(BINOMIAL5):
            m[i, reflect_index(center + k - 2, n)] += wk
    return m


def gaussian_down(x: TensorMap, tape: Optional[Tape] = None) -> TensorMap:
    """Smooth with the separable binomial kernel and halve both extents (ceil)."""
    h, w = x.shape[2], x.shape[3]
    if h < 2 or w < 2:
        raise ShapeError(f"cannot downsample a {h}x{w} image")
    return T.separable_resample(x, _smooth_subsample_matrix(h),
                                _smooth_subsample_matrix(w), tape=tape)


def laplacian_pyramid(x: TensorMap, spec: PyramidSpec,
                      tape: Optional[Tape] = None) -> list:
    """Band-pass levels 0..J-2 plus the residual low-pass as level J-1.

    Reconstruction is the telescoping sum: upsample each coarse level back
    and add the band-pass, finest last.
    """
    spec.validate_for(x.shape[2], x.shape[3])
    levels = []
    cur = x
    for _ in range(spec.levels - 1):
        down = gaussian_down(cur, tape=tape)
        up = T.nearest_upsample(down, 2, out_hw=(cur.shape[2], cur.shape[3]), tape=tape)
        levels.append(T.sub(cur, up, tape=tape))
        cur = down
    levels.append(cur)
    return levels


def reconstruct(levels: list) -> TensorMap:
    """Invert the pyramid (used by tests; not differentiable on purpose)."""
    cur = levels[-1]
    for band in reversed(levels[:-1]):
        up = T.nearest_upsample(cur, 2, out_hw=(band.shape[2], band.shape[3]))
        cur = T.add(band, up)
    return cur


def lap_l1(x1: TensorMap, x2: TensorMap, spec: PyramidSpec,
           tape: Optional[Tape] = None) -> TensorMap:
    """Sum over levels j of 2^(-2j) * mean |level_j(x1 - x2)|."""
    if x1.shape != x2.shape:
        raise ShapeError(f"lap_l1: shapes {x1.shape} and {x2.shape} differ")
    diff = T.sub(x1, x2, tape=tape)
    total = None
    for j, level in enumerate(laplacian_pyramid(diff, spec, tape=tape)):
        term = T.mul_scalar(T.mean_all(T.abs_(level, tape=tape), tape=tape),
                            2.0 ** (-2 * j), tape=tape)
        total = term if total is None else T.add(total, term, tape=tape)
    return total


def combined_loss(x_hat: TensorMap, x: TensorMap, spec: PyramidSpec,
                  tape: Optional[Tape] = None) -> TensorMap:
    """Pyramid-L1 distance plus mean squared error with weight 1.0."""
    if x_hat.shape != x.shape:
        raise ShapeError(f"combined_loss: shapes {x_hat.shape} and {x.shape} differ")
    pyr = lap_l1(x_hat, x, spec, tape=tape)
    mse = T.mean_all(T.square(T.sub(x_hat, x, tape=tape), tape=tape), tape=tape)
    return T.add(pyr, mse, tape=tape)
