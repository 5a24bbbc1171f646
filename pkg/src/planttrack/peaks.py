"""Heatmap normalization, thresholded non-maximum suppression, keypoint CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from planttrack.errors import FormatError, ValidationError
from planttrack.features import DEFAULT_FACTOR
from planttrack.synthetic import CLASSES, cell_to_pixel, class_index

KEYPOINT_HEADER = ["class", "cell_x", "cell_y", "pixel_x", "pixel_y", "score"]


@dataclass(frozen=True)
class Keypoint:
    cell_x: int
    cell_y: int
    pixel_x: int
    pixel_y: int
    score: float
    cls: str


@dataclass
class PeakConfig:
    threshold: float = 0.6
    radius: int = 1
    factor: int = DEFAULT_FACTOR

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ValidationError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.radius < 0:
            raise ValidationError(f"radius must be >= 0, got {self.radius}")
        if self.factor < 1:
            raise ValidationError("factor must be >= 1")


def normalize(heatmap: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a flat map (range < 1e-12) becomes all zeros."""
    m = np.asarray(heatmap, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo < 1e-12:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def peak_mask(heatmap: np.ndarray, threshold: float, radius: int) -> np.ndarray:
    """Boolean mask of NMS survivors.

    A cell survives when it is above ``threshold`` and no Chebyshev neighbour
    within ``radius`` beats it. Equal neighbours earlier in (y, x) order beat
    it; equal neighbours later do not, so a plateau keeps only its first cell.
    """
    m = np.asarray(heatmap, dtype=np.float64)
    h, w = m.shape
    r = radius
    padded = np.pad(m, r, constant_values=-np.inf)
    keep = m > threshold
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            if (dy, dx) < (0, 0):
                keep &= m > nb
            else:
                keep &= m >= nb
    return keep


def extract_peaks(heatmap: np.ndarray, cfg: PeakConfig, cls: str) -> list[Keypoint]:
    class_index(cls)
    m = np.asarray(heatmap, dtype=np.float64)
    ys, xs = np.nonzero(peak_mask(m, cfg.threshold, cfg.radius))
    out = []
    for y, x in zip(ys.tolist(), xs.tolist()):
        px, py = cell_to_pixel(x, y, cfg.factor)
        out.append(Keypoint(x, y, px, py, float(m[y, x]), cls))
    out.sort(key=lambda k: (-k.score, k.cell_y, k.cell_x))
    return out


def sort_keypoints(kps: list[Keypoint]) -> list[Keypoint]:
    return sorted(kps, key=lambda k: (-k.score, k.cell_y, k.cell_x, class_index(k.cls)))


def detect_from_prediction(pred: np.ndarray, cfg: PeakConfig) -> list[Keypoint]:
    """Keypoints from one ``(H, W, 2)`` prediction (channel order = CLASSES)."""
    kps = []
    for c, name in enumerate(CLASSES):
        kps += extract_peaks(normalize(pred[..., c]), cfg, name)
    return sort_keypoints(kps)


def detect(model, features, cfg: PeakConfig | None = None) -> list[Keypoint]:
    """Run ``model`` on a feature grid and extract peaks from its final stage."""
    cfg = cfg or PeakConfig()
    final = model.predict(features)[-1]
    return detect_from_prediction(final, cfg)


def write_keypoints(path: str | Path, kps: list[Keypoint]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(KEYPOINT_HEADER)
        for k in kps:
            out.writerow([k.cls, k.cell_x, k.cell_y, k.pixel_x, k.pixel_y, repr(float(k.score))])


def read_keypoints(path: str | Path) -> list[Keypoint]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != KEYPOINT_HEADER:
        raise FormatError(f"{path}: missing keypoint header {','.join(KEYPOINT_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(KEYPOINT_HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(KEYPOINT_HEADER)} fields, got {len(row)}")
        try:
            cls = row[0]
            class_index(cls)
            kp = Keypoint(int(row[1]), int(row[2]), int(row[3]), int(row[4]), float(row[5]), cls)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        out.append(kp)
    return out
