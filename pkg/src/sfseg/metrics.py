"""Angles, Jaccard scores and per-iteration convergence tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 3:
            raise ShapeError(f"mask must be 3-D, got ndim={bits.ndim}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def __array__(self, dtype=None, copy=None):
        return self.bits if dtype is None else self.bits.astype(dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


def angle_degrees(x, y) -> float:
    """Angle between two vectors (any shape, flattened) in degrees, in [0, 180]."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.size} vs {y.size}")
    mx, my = np.max(np.abs(x), initial=0.0), np.max(np.abs(y), initial=0.0)
    if mx == 0 or my == 0:
        raise ParameterError("angle is undefined for a zero vector")
    # rescale first so tiny entries do not underflow when squared
    x, y = x / mx, y / my
    cos = float(np.dot(x / np.linalg.norm(x), y / np.linalg.norm(y)))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def jaccard(a, b) -> float:
    """Intersection over union; two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def threshold_final(x, frac: float) -> BinaryMask:
    """Mask of voxels strictly above ``frac * max(x)``.

    Ties go to background, and an all-zero input yields an empty mask.
    """
    x = np.asarray(x)
    m = x.max()
    if m <= 0:
        return BinaryMask(np.zeros(x.shape, dtype=bool))
    return BinaryMask(x > frac * m)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    angle_deg: float | None
    iou: float | None


def trace_convergence(iterates: Iterable, reference=None, ground_truth=None, frac: float = 0.5) -> list[TraceRow]:
    """Tabulate angle-to-reference and IoU-to-ground-truth for a sequence of iterates.

    Iterations are numbered from 1. IoU binarizes each iterate with
    :func:`threshold_final` at ``frac``.
    """
    rows = []
    for k, x in enumerate(iterates, start=1):
        angle = angle_degrees(x, reference) if reference is not None else None
        iou = jaccard(threshold_final(x, frac), ground_truth) if ground_truth is not None else None
        rows.append(TraceRow(k, angle, iou))
    return rows


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.9g}"


def trace_to_csv(rows: Sequence[TraceRow], path=None) -> str:
    """Render rows as ``iter,angle_deg,iou`` CSV (9 significant digits); optionally write to ``path``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "angle_deg", "iou"])
    for r in rows:
        w.writerow([r.iteration, _fmt(r.angle_deg), _fmt(r.iou)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [
            TraceRow(
                int(r["iter"]),
                float(r["angle_deg"]) if r["angle_deg"] else None,
                float(r["iou"]) if r["iou"] else None,
            )
            for r in csv.DictReader(fh)
        ]
