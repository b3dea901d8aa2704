"""Region-restricted MSE metrics and evaluation reports.

Inpainting quality is reported separately over known pixels (mask 1) and
the hole (mask 0); other tasks get the full-image error only.  All numbers
are computed on unquantized tensors; PNG round-trip drift is the caller's
concern.
"""

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import losses
from .tensor import ShapeError, TensorMap

CSV_HEADER = ["id", "task", "mode", "mse_full", "mse_known", "mse_hole", "lap_l1"]


def _as_array(x) -> np.ndarray:
    a = x.data if isinstance(x, TensorMap) else np.asarray(x)
    return a.reshape((-1,) + a.shape[-2:])


def mse_region(x_hat, x, mask: Optional[np.ndarray], region: str = "full") -> float:
    """Mean squared difference over the selected pixel set, all channels.

    region: "known" (mask 1), "hole" (mask 0) or "full".  An empty selection
    is an error, not zero.
    """
    a, b = _as_array(x_hat), _as_array(x)
    if a.shape != b.shape:
        raise ShapeError(f"mse_region: shapes {a.shape} and {b.shape} differ")
    if region == "full":
        sel = np.ones(a.shape[-2:], dtype=bool)
    else:
        if mask is None:
            raise ValueError(f"region {region!r} needs a mask")
        if mask.shape != a.shape[-2:]:
            raise ShapeError(f"mask {mask.shape} does not match image {a.shape[-2:]}")
        vals = np.unique(mask)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError("mask entries must be exactly 0 or 1")
        if region == "known":
            sel = mask == 1
        elif region == "hole":
            sel = mask == 0
        else:
            raise ValueError(f"region must be known/hole/full, got {region!r}")
    if not sel.any():
        raise ValueError(f"region {region!r} selects no pixels")
    d = a[:, sel] - b[:, sel]
    return float(np.mean(d * d))


@dataclass
class EvalRow:
    id: str
    task: str
    mode: str
    mse_full: float
    mse_known: Optional[float]
    mse_hole: Optional[float]
    lap_l1: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def aggregate(self) -> dict:
        """Arithmetic mean per column over the rows where it is defined."""
        out = {}
        for key in ("mse_full", "mse_known", "mse_hole", "lap_l1"):
            vals = [getattr(r, key) for r in self.rows if getattr(r, key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.id, r.task, r.mode, f"{r.mse_full:.8f}",
                            "" if r.mse_known is None else f"{r.mse_known:.8f}",
                            "" if r.mse_hole is None else f"{r.mse_hole:.8f}",
                            f"{r.lap_l1:.8f}"])


def evaluate(results: list, truths: list, specs: list,
             ids: Optional[list] = None) -> EvalReport:
    """Score restorations against ground truth under their degradation specs."""
    if not len(results) == len(truths) == len(specs):
        raise ValueError(
            f"length mismatch: {len(results)} results, {len(truths)} truths, "
            f"{len(specs)} specs")
    report = EvalReport()
    for i, (res, truth, spec) in enumerate(zip(results, truths, specs)):
        img = res.image if hasattr(res, "image") else res
        mode = res.mode if hasattr(res, "mode") else ""
        truth_t = truth if isinstance(truth, TensorMap) else TensorMap(np.asarray(truth))
        img_t = img if isinstance(img, TensorMap) else TensorMap(np.asarray(img))
        a = img_t.data.reshape((1,) + img_t.data.shape[-3:])
        b = truth_t.data.reshape((1,) + truth_t.data.shape[-3:])
        full = mse_region(a, b, None, "full")
        known = hole = None
        if spec.kind == "inpaint":
            if (spec.mask == 1).any():
                known = mse_region(a, b, spec.mask, "known")
            if (spec.mask == 0).any():
                hole = mse_region(a, b, spec.mask, "hole")
        pyr = losses.PyramidSpec(losses.default_levels(a.shape[-2], a.shape[-1]))
        ll1 = losses.lap_l1(TensorMap(a), TensorMap(b), pyr).item()
        report.rows.append(EvalRow(
            id=str(ids[i]) if ids is not None else str(i),
            task=spec.kind, mode=mode, mse_full=full,
            mse_known=known, mse_hole=hole, lap_l1=ll1))
    return report
