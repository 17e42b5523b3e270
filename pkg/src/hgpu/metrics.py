"""Region similarity (J), boundary accuracy (F) and their sequence statistics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

RECALL_THRESHOLD = 0.5
BOUNDARY_TOLERANCE_FRACTION = 0.0075


@dataclass(frozen=True)
class FrameScore:
    sequence: str
    frame: int
    j: float
    f: float

    def __post_init__(self):
        if not (0.0 <= self.j <= 1.0 and 0.0 <= self.f <= 1.0):
            raise ValueError(f"scores out of [0, 1]: J={self.j}, F={self.f}")


@dataclass(frozen=True)
class Statistics:
    mean: float
    recall: float
    decay: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "recall": self.recall, "decay": self.decay}


@dataclass(frozen=True)
class AggregateReport:
    j: Statistics
    f: Statistics

    @property
    def jf_mean(self) -> float:
        return (self.j.mean + self.f.mean) / 2

    def to_json(self) -> str:
        return json.dumps({"J": self.j.as_dict(), "F": self.f.as_dict(), "JF_mean": self.jf_mean},
                          indent=2, sort_keys=True)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground where prob >= threshold."""
    return np.asarray(prob) >= threshold


def region_j(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; two empty masks score 1."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or lying on the image edge."""
    m = np.asarray(mask, bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def default_tolerance(shape: tuple) -> int:
    return math.ceil(BOUNDARY_TOLERANCE_FRACTION * math.hypot(*shape[:2]))


def _within(points: np.ndarray, target: np.ndarray, tolerance: float) -> np.ndarray:
    """Which ``points`` lie within Euclidean ``tolerance`` of a ``target`` pixel."""
    if tolerance <= 0:
        return points & target
    dist = ndimage.distance_transform_edt(~target)
    return points & (dist <= tolerance)


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance: float | None = None) -> float:
    """F-measure between mask boundaries matched within a disk of ``tolerance`` pixels."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if tolerance is None:
        tolerance = default_tolerance(pred.shape)
    pb, gb = boundary_map(pred), boundary_map(gt)
    n_p, n_g = np.count_nonzero(pb), np.count_nonzero(gb)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = np.count_nonzero(_within(pb, gb, tolerance)) / n_p
    recall = np.count_nonzero(_within(gb, pb, tolerance)) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def score_sequence(seq_id: str, preds, gts, tolerance: float | None = None) -> list[FrameScore]:
    return [FrameScore(seq_id, k, region_j(p, g), boundary_f(p, g, tolerance))
            for k, (p, g) in enumerate(zip(preds, gts))]


def sequence_statistics(values) -> Statistics:
    """Mean, recall (> 0.5) and decay (first-quartile mean minus last-quartile mean)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no frames to aggregate")
    q = math.ceil(v.size / 4)
    return Statistics(float(v.mean()), float(np.mean(v > RECALL_THRESHOLD)),
                      float(v[:q].mean() - v[-q:].mean()))


def aggregate(scores: list[FrameScore], exclude_ends: bool = True) -> AggregateReport:
    """Per-sequence statistics averaged over sequences.

    First and last frames of each sequence are skipped when ``exclude_ends``
    is set and the sequence is long enough to keep at least one frame.
    """
    by_seq: dict[str, list[FrameScore]] = {}
    for s in scores:
        by_seq.setdefault(s.sequence, []).append(s)
    j_stats, f_stats = [], []
    for seq_id in sorted(by_seq):
        frames = sorted(by_seq[seq_id], key=lambda s: s.frame)
        if exclude_ends and len(frames) > 2:
            frames = frames[1:-1]
        j_stats.append(sequence_statistics([s.j for s in frames]))
        f_stats.append(sequence_statistics([s.f for s in frames]))
    if not j_stats:
        raise ValueError("no scores to aggregate")

    def avg(stats: list[Statistics]) -> Statistics:
        return Statistics(float(np.mean([s.mean for s in stats])),
                          float(np.mean([s.recall for s in stats])),
                          float(np.mean([s.decay for s in stats])))

    return AggregateReport(avg(j_stats), avg(f_stats))


def scores_to_csv(scores: list[FrameScore]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sequence", "frame", "J", "F"])
    for s in scores:
        writer.writerow([s.sequence, s.frame, repr(float(s.j)), repr(float(s.f))])
    return buf.getvalue()
