"""Detection and tracking metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from planttrack.errors import ValidationError
from planttrack.peaks import Keypoint
from planttrack.synthetic import CLASSES
from planttrack.tracker import Track

GtKeypoint = tuple[int, int, str]


@dataclass
class MatchResult:
    matches: list[tuple[int, int]]  # (pred index, gt index)
    false_positives: list[int]
    misses: list[int]


def match_detections(pred: Sequence[Keypoint], gt: Sequence[GtKeypoint], radius: int) -> MatchResult:
    """Greedy matching in descending score order.

    Each prediction claims the nearest unclaimed ground-truth keypoint of its
    class within Chebyshev ``radius`` (ties: Euclidean distance, then gt order).
    """
    if radius < 0:
        raise ValidationError(f"match radius must be >= 0, got {radius}")
    order = sorted(range(len(pred)), key=lambda i: (-pred[i].score, pred[i].cell_y, pred[i].cell_x, i))
    claimed: set[int] = set()
    matches, fps = [], []
    for pi in order:
        p = pred[pi]
        best, best_key = None, None
        for gi, (gx, gy, gcls) in enumerate(gt):
            if gi in claimed or gcls != p.cls:
                continue
            cheb = max(abs(gx - p.cell_x), abs(gy - p.cell_y))
            if cheb > radius:
                continue
            key = (cheb, (gx - p.cell_x) ** 2 + (gy - p.cell_y) ** 2, gi)
            if best_key is None or key < best_key:
                best, best_key = gi, key
        if best is None:
            fps.append(pi)
        else:
            claimed.add(best)
            matches.append((pi, best))
    misses = [gi for gi in range(len(gt)) if gi not in claimed]
    return MatchResult(matches, fps, misses)


def pck(matches: int, gt_count: int) -> float | None:
    """Fraction of ground truth matched; ``None`` when there is no ground truth."""
    if gt_count <= 0:
        return None
    return matches / gt_count


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


@dataclass
class Counts:
    matches: int = 0
    false_positives: int = 0
    misses: int = 0

    @property
    def n_pred(self) -> int:
        return self.matches + self.false_positives

    @property
    def n_gt(self) -> int:
        return self.matches + self.misses

    def summary(self) -> dict:
        return {
            "pck": pck(self.matches, self.n_gt),
            "precision": _ratio(self.matches, self.n_pred),
            "recall": _ratio(self.matches, self.n_gt),
            "matches": self.matches,
            "false_positives": self.false_positives,
            "misses": self.misses,
        }


@dataclass
class DetectionMetrics:
    match_radius: int
    overall: Counts = field(default_factory=Counts)
    per_class: dict[str, Counts] = field(default_factory=lambda: {c: Counts() for c in CLASSES})

    def add(self, pred: Sequence[Keypoint], gt: Sequence[GtKeypoint]) -> MatchResult:
        res = match_detections(pred, gt, self.match_radius)
        self.overall.matches += len(res.matches)
        self.overall.false_positives += len(res.false_positives)
        self.overall.misses += len(res.misses)
        for pi, _ in res.matches:
            self.per_class[pred[pi].cls].matches += 1
        for pi in res.false_positives:
            self.per_class[pred[pi].cls].false_positives += 1
        for gi in res.misses:
            self.per_class[gt[gi][2]].misses += 1
        return res

    @property
    def pck(self) -> float | None:
        return pck(self.overall.matches, self.overall.n_gt)

    @property
    def precision(self) -> float | None:
        return _ratio(self.overall.matches, self.overall.n_pred)

    @property
    def recall(self) -> float | None:
        return _ratio(self.overall.matches, self.overall.n_gt)

    def to_dict(self) -> dict:
        doc = {"match_radius": self.match_radius}
        doc.update(self.overall.summary())
        doc["per_class"] = {c: self.per_class[c].summary() for c in CLASSES}
        return doc


def evaluate_detections(
    preds: Iterable[Sequence[Keypoint]], gts: Iterable[Sequence[GtKeypoint]], radius: int
) -> DetectionMetrics:
    m = DetectionMetrics(radius)
    for p, g in zip(preds, gts, strict=True):
        m.add(p, g)
    return m


@dataclass
class TrackingMetrics:
    mean_error: float | None
    survival: float | None
    per_frame: list[float | None]

    def to_dict(self) -> dict:
        return {"mean_endpoint_error": self.mean_error, "survival": self.survival, "per_frame_error": self.per_frame}


def tracking_error(tracks: Sequence[Track], gt: Mapping[int, Sequence[tuple[int, int] | None]]) -> TrackingMetrics:
    """Endpoint error against ground truth trajectories keyed by track id.

    ``gt[id][frame]`` is the true cell at absolute frame index ``frame`` (or
    ``None``). Tracks without an entry in ``gt`` are ignored. The per-frame
    error is the mean over tracks visible at that frame; ``mean_error`` is the
    mean of those per-frame values. Survival is the fraction of evaluated
    tracks visible at the last frame.
    """
    scored = [t for t in tracks if t.id in gt]
    if not scored:
        return TrackingMetrics(None, None, [])
    n_frames = max(max(len(gt[t.id]) for t in scored), max(t.last_frame + 1 for t in scored))
    per_frame: list[float | None] = []
    for f in range(n_frames):
        errs = []
        for t in scored:
            pos = t.at(f)
            truth = gt[t.id][f] if f < len(gt[t.id]) else None
            if pos is not None and truth is not None:
                errs.append(math.hypot(pos[0] - truth[0], pos[1] - truth[1]))
        per_frame.append(sum(errs) / len(errs) if errs else None)
    valid = [e for e in per_frame if e is not None]
    if not valid:
        return TrackingMetrics(None, None, per_frame)
    last = n_frames - 1
    survival = sum(1 for t in scored if t.at(last) is not None) / len(scored)
    return TrackingMetrics(sum(valid) / len(valid), survival, per_frame)
