"""Concordance correlation coefficient: masked metric, differentiable loss, evaluation."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .dataio import AnnotationTrack, atomic_write
from .errors import BatchError, DomainError, EvaluationError
from .numerics import Tensor


@dataclass(frozen=True)
class CccComponents:
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    covar: float
    n: int

    @property
    def value(self) -> float:
        denom = self.var_x + self.var_y + (self.mean_x - self.mean_y) ** 2
        if denom == 0.0:
            return 1.0
        return float(np.clip(2.0 * self.covar / denom, -1.0, 1.0))


def ccc_components(x, y, mask=None) -> CccComponents:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError(f"ccc needs two equal-length vectors, got {x.shape} and {y.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DomainError(f"mask shape {mask.shape} does not match {x.shape}")
        x, y = x[mask], y[mask]
    if x.size == 0:
        raise DomainError("ccc needs at least one valid frame")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    return CccComponents(float(mx), float(my), float((dx * dx).mean()), float((dy * dy).mean()),
                         float((dx * dy).mean()), int(x.size))


def ccc(x, y, mask=None) -> float:
    """Masked concordance correlation with population moments.

    Uses ``2 cov / (var_x + var_y + (mean_x - mean_y)^2)`` so a constant input
    gives 0 instead of 0/0; two identical constants give 1.
    """
    return ccc_components(x, y, mask).value


def _ccc_tensor(x: Tensor, y: np.ndarray) -> Tensor:
    mx = nx.mean(x)
    my = float(y.mean())
    dx = x - mx
    dy = y - my
    var_x = nx.mean(dx * dx)
    var_y = float((dy * dy).mean())
    cov = nx.mean(dx * dy)
    return (2.0 * cov) / (var_x + var_y + (mx - my) * (mx - my))


def ccc_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean over valence and arousal of ``1 - CCC``, kept on the autodiff graph."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise DomainError(f"pred {pred.shape} and target {target.shape} must both be T x 2")
    rows = np.arange(pred.shape[0]) if mask is None else np.flatnonzero(np.asarray(mask, dtype=bool))
    if rows.size < 2:
        raise BatchError(f"ccc_loss needs at least 2 valid frames, got {rows.size}")
    if rows.size != pred.shape[0]:
        pred = nx.take_rows(pred, rows)
        target = target[rows]
    loss_v = 1.0 - _ccc_tensor(pred[:, 0], target[:, 0])
    loss_a = 1.0 - _ccc_tensor(pred[:, 1], target[:, 1])
    return (loss_v + loss_a) * 0.5


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    per_video: dict[str, tuple[float, float]]
    overall_valence: float
    overall_arousal: float
    valid_frames: int
    overall_mean: float = field(init=False)

    def __post_init__(self):
        self.overall_mean = (self.overall_valence + self.overall_arousal) / 2

    def summary_line(self) -> str:
        return (f"valence={self.overall_valence:.6f} arousal={self.overall_arousal:.6f} "
                f"mean={self.overall_mean:.6f}")

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["video_id", "ccc_v", "ccc_a"])
        for vid in sorted(self.per_video):
            cv, ca = self.per_video[vid]
            w.writerow([vid, repr(cv), repr(ca)])
        w.writerow(["OVERALL", repr(self.overall_valence), repr(self.overall_arousal)])
        return out.getvalue()

    def write_csv(self, path: str | os.PathLike) -> None:
        atomic_write(path, self.to_csv().encode("utf-8"))


def evaluate(predictions: Mapping[str, np.ndarray],
             annotations: Mapping[str, AnnotationTrack]) -> EvalReport:
    """Per-video CCC plus overall CCC over all valid frames of all videos concatenated.

    Videos are reduced in sorted-id order. Videos without valid frames are
    left out of both the per-video table and the concatenation.
    """
    pv, pa, tv, ta = [], [], [], []
    per_video: dict[str, tuple[float, float]] = {}
    for vid in sorted(annotations):
        if vid not in predictions:
            raise EvaluationError(f"no predictions for video {vid!r}")
        ann = annotations[vid]
        pred = np.asarray(predictions[vid], dtype=np.float64)
        if pred.shape != (ann.frames, 2):
            raise EvaluationError(f"video {vid!r}: predictions {pred.shape} for {ann.frames} frames")
        m = ann.valid
        if not m.any():
            continue
        per_video[vid] = (ccc(pred[:, 0], ann.valence, m), ccc(pred[:, 1], ann.arousal, m))
        pv.append(pred[m, 0])
        pa.append(pred[m, 1])
        tv.append(ann.valence[m])
        ta.append(ann.arousal[m])
    if not pv:
        raise EvaluationError("no valid frames in any video")
    pv, pa, tv, ta = (np.concatenate(a) for a in (pv, pa, tv, ta))
    return EvalReport(per_video, ccc(pv, tv), ccc(pa, ta), int(pv.size))
