"""Small input constructors shared by several test modules."""

import numpy as np

from planttrack.peaks import Keypoint


def kp(x, y, cls="fruit", score=1.0):
    return Keypoint(x, y, 14 * x + 7, 14 * y + 7, score, cls)


def random_frame(seed, size=16, f=8):
    return np.random.default_rng(seed).standard_normal((size, size, f)).astype(np.float32)


def occlude(frame, cell, radius, value):
    out = frame.copy()
    x, y = cell
    out[max(0, y - radius) : y + radius + 1, max(0, x - radius) : x + radius + 1] = value
    return out


def appearance_change_sequence(n=15, change_at=5, cell=(8, 8)):
    """Frames where the patch around ``cell`` is replaced for good at ``change_at``."""
    f0 = random_frame(6)
    new_look = np.random.default_rng(7).standard_normal((7, 7, 8)).astype(np.float32)
    changed = f0.copy()
    x, y = cell
    changed[y - 3 : y + 4, x - 3 : x + 4] = new_look
    return [f0 if t < change_at else changed for t in range(n)]


LEVELS = np.array([0.0, 0.3, 0.59, 0.6, np.nextafter(0.6, 1.0), 0.61, 0.8, 0.9, 1.0])


def random_map(rng):
    """Heatmaps mixing continuous values, plateaus and threshold-boundary levels."""
    h, w = (int(v) for v in rng.integers(1, 12, size=2))
    kind = rng.integers(3)
    if kind == 0:
        return rng.uniform(size=(h, w))
    if kind == 1:
        return rng.choice(LEVELS, size=(h, w))
    m = rng.uniform(size=(h, w))
    m[rng.uniform(size=(h, w)) < 0.5] = rng.choice(LEVELS)
    return m
