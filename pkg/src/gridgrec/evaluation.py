"""GREC scoring: IoU, one-to-one box matching, per-sample F1, mean F1 and
the fraction of samples matched perfectly at IoU 0.5."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DuplicatePrediction, MissingPrediction, UnknownPrediction
from .render import PixelBBox
from .samples import TrainingSample

SETTINGS = ("full-dialogue", "mention-only")


@dataclass(frozen=True)
class PredictionSet:
    sample_id: str
    boxes: tuple[PixelBBox, ...] = ()


def _snap(v: float) -> int:
    return math.floor(v + 0.5)


def pixel_rect(b: PixelBBox) -> tuple[int, int, int, int]:
    """Half-open integer rectangle (x0, y0, x1, y1) covered by ``b``."""
    return _snap(b.x), _snap(b.y), _snap(b.x + b.w), _snap(b.y + b.h)


def iou(a: PixelBBox, b: PixelBBox) -> float:
    ax0, ay0, ax1, ay1 = pixel_rect(a)
    bx0, by0, bx1, by1 = pixel_rect(b)
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(pred: Sequence[PixelBBox], gt: Sequence[PixelBBox]) -> np.ndarray:
    return np.array([[iou(p, g) for g in gt] for p in pred], dtype=np.float64).reshape(len(pred), len(gt))


def match_sample(pred: PredictionSet | Sequence[PixelBBox], gt: Sequence[PixelBBox],
                 threshold: float = 0.5) -> tuple[int, int, int]:
    """(TP, FP, FN) under the one-to-one matching with the most pairs at
    IoU >= threshold; among those, the largest total IoU."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    boxes = list(pred.boxes if isinstance(pred, PredictionSet) else pred)
    n, m = len(boxes), len(gt)
    if n == 0 or m == 0:
        return 0, n, m
    ious = iou_matrix(boxes, gt)
    ok = ious >= threshold
    # each admissible pair is worth more than any IoU total, so count dominates
    weight = np.where(ok, (min(n, m) + 1) + ious, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    tp = int(ok[rows, cols].sum())
    return tp, n - tp, m - tp


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """2TP / (2TP + FP + FN); the all-zero case (no target, no prediction) is 1."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


@dataclass
class EvalReport:
    per_sample_f1: dict
    mean_f1: float
    precision_at_f1_1: float
    setting: str
    n_samples: int
    counts: dict = field(default_factory=dict)  # sample_id -> (tp, fp, fn)
    threshold: float = 0.5

    def to_dict(self) -> dict:
        ids = sorted(self.per_sample_f1)
        return {
            "setting": self.setting,
            "n_samples": self.n_samples,
            "threshold": self.threshold,
            "mean_f1": self.mean_f1,
            "precision_at_f1_1": self.precision_at_f1_1,
            "per_sample": [
                {"sample_id": i, "f1": self.per_sample_f1[i],
                 "tp": self.counts[i][0], "fp": self.counts[i][1], "fn": self.counts[i][2]}
                for i in ids
            ],
        }


def summarize(per_sample_f1: dict) -> tuple[float, float]:
    """(mean F1, fraction with F1 exactly 1) over the values in id order."""
    vals = [per_sample_f1[k] for k in sorted(per_sample_f1)]
    if not vals:
        return 0.0, 0.0
    return math.fsum(vals) / len(vals), sum(v == 1.0 for v in vals) / len(vals)


def evaluate(preds: Iterable[PredictionSet], dataset: Sequence[TrainingSample],
             setting: str = "full-dialogue", threshold: float = 0.5) -> EvalReport:
    """Score ``preds`` against ``dataset``. ``setting`` only labels the report:
    it records which text the model saw; the harness compares boxes alone."""
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    preds = list(preds)
    by_id: dict[str, PredictionSet] = {}
    dup = set()
    for p in preds:
        if p.sample_id in by_id:
            dup.add(p.sample_id)
        by_id[p.sample_id] = p
    if dup:
        raise DuplicatePrediction(dup)
    known = {s.sample_id for s in dataset}
    missing = known - set(by_id)
    if missing:
        raise MissingPrediction(missing)
    unknown = set(by_id) - known
    if unknown:
        raise UnknownPrediction(unknown)
    f1s, counts = {}, {}
    for s in dataset:
        c = match_sample(by_id[s.sample_id], s.gt_boxes, threshold)
        counts[s.sample_id] = c
        f1s[s.sample_id] = f1_from_counts(*c)
    mean, prec = summarize(f1s)
    return EvalReport(f1s, mean, prec, setting, len(dataset), counts, threshold)


def perfect_predictions(dataset: Sequence[TrainingSample]) -> list[PredictionSet]:
    return [PredictionSet(s.sample_id, tuple(s.gt_boxes)) for s in dataset]


def empty_predictions(dataset: Sequence[TrainingSample]) -> list[PredictionSet]:
    return [PredictionSet(s.sample_id, ()) for s in dataset]


# --------------------------------------------------------------------------
# files


def prediction_to_dict(p: PredictionSet) -> dict:
    return {"sample_id": p.sample_id, "boxes": [b.as_list() for b in p.boxes]}


def prediction_from_dict(d: dict) -> PredictionSet:
    return PredictionSet(str(d["sample_id"]), tuple(PixelBBox.from_list(b) for b in d.get("boxes", [])))


def write_predictions(preds: Iterable[PredictionSet], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in preds:
            f.write(json.dumps(prediction_to_dict(p), separators=(",", ":")) + "\n")


def read_predictions(path) -> list[PredictionSet]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(prediction_from_dict(json.loads(line)))
    return out


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
