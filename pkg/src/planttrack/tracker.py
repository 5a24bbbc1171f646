"""Patch-correlation point tracker prompted from first-frame keypoints.

Each track remembers the feature patch around its prompt (or around its last
re-prompt). In every later frame it moves to the cell inside the search
window whose patch has the highest cosine similarity to that reference. When
even the best match falls under the similarity floor the track is marked
invisible for the frame and keeps searching from its last known cell.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from planttrack.errors import FormatError, ValidationError
from planttrack.features import FeatureMap
from planttrack.peaks import Keypoint
from planttrack.synthetic import class_index

TRACK_HEADER = ["id", "class", "frame", "cell_x", "cell_y", "visible"]

Cell = tuple[int, int]


@dataclass
class TrackConfig:
    patch_radius: int = 1
    search_radius: int = 3
    similarity_floor: float = 0.5
    reprompt_every: int = 0
    match_radius: int = 2

    def __post_init__(self):
        if min(self.patch_radius, self.search_radius, self.match_radius) < 0:
            raise ValidationError("radii must be >= 0")
        if self.reprompt_every < 0:
            raise ValidationError("re-prompt period must be >= 0")
        if not -1 <= self.similarity_floor <= 1:
            raise ValidationError("similarity floor must be in [-1, 1]")


@dataclass
class Track:
    """One tracked point. ``positions[i]`` is the cell at frame ``born_frame + i``,
    or ``None`` where the track was not visible."""

    id: int
    cls: str
    born_frame: int
    positions: list[Cell | None]
    reference: np.ndarray | None = field(default=None, compare=False, repr=False)
    # best similarity per frame; 1.0 placeholder on (re-)anchored frames
    similarity: list[float] = field(default_factory=list, compare=False, repr=False)

    @property
    def visible(self) -> list[bool]:
        return [p is not None for p in self.positions]

    @property
    def last_frame(self) -> int:
        return self.born_frame + len(self.positions) - 1

    def at(self, frame: int) -> Cell | None:
        i = frame - self.born_frame
        if 0 <= i < len(self.positions):
            return self.positions[i]
        return None

    def last_known(self, upto: int | None = None) -> Cell:
        stop = len(self.positions) if upto is None else min(len(self.positions), upto - self.born_frame + 1)
        for p in reversed(self.positions[:stop]):
            if p is not None:
                return p
        raise ValidationError(f"track {self.id} has no known position")


def patch_bank(frame: np.ndarray, radius: int) -> np.ndarray:
    """``(H, W, C)`` -> ``(H, W, C*(2r+1)^2)`` zero-padded patches around every cell, float64."""
    x = np.asarray(frame, dtype=np.float64)
    h, w, c = x.shape
    k = 2 * radius + 1
    xp = np.pad(x, ((radius, radius), (radius, radius), (0, 0)))
    return sliding_window_view(xp, (k, k), axis=(0, 1)).reshape(h, w, c * k * k)


def _cosine(candidates: np.ndarray, ref: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(candidates, axis=-1) * np.linalg.norm(ref)
    dots = candidates @ ref
    out = np.zeros_like(dots)
    ok = norms > 0
    out[ok] = dots[ok] / norms[ok]
    return out


def _search(bank: np.ndarray, ref: np.ndarray, prev: Cell, radius: int) -> tuple[Cell, float]:
    h, w, _ = bank.shape
    px, py = prev
    y0, y1 = max(0, py - radius), min(h - 1, py + radius)
    x0, x1 = max(0, px - radius), min(w - 1, px + radius)
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    ys, xs = ys.ravel(), xs.ravel()
    sims = _cosine(bank[ys, xs], ref)
    disp = (xs - px) ** 2 + (ys - py) ** 2
    # highest similarity, then smallest displacement, then (y, x)
    order = np.lexsort((xs, ys, disp, -sims))
    best = order[0]
    return (int(xs[best]), int(ys[best])), float(sims[best])


def _frames_array(seq: Sequence) -> list[np.ndarray]:
    frames = [f.data if isinstance(f, FeatureMap) else np.asarray(f, dtype=np.float32) for f in seq]
    if not frames:
        raise ValidationError("empty sequence")
    shape = frames[0].shape
    if len(shape) != 3 or any(f.shape != shape for f in frames):
        raise ValidationError("all frames must share one (h, w, f) shape")
    return frames


Detector = Callable[[int, np.ndarray], list[Keypoint]]


def track(
    seq: Sequence,
    prompts: list[Keypoint],
    cfg: TrackConfig | None = None,
    detector: Detector | None = None,
) -> list[Track]:
    """Track ``prompts`` (frame-0 keypoints) through ``seq``.

    With ``cfg.reprompt_every > 0`` and a ``detector(frame_index, frame)``
    callback, fresh detections are merged in every that many frames.
    """
    cfg = cfg or TrackConfig()
    frames = _frames_array(seq)
    h, w, _ = frames[0].shape
    bank = patch_bank(frames[0], cfg.patch_radius)
    tracks = []
    for i, kp in enumerate(prompts):
        if not (0 <= kp.cell_x < w and 0 <= kp.cell_y < h):
            raise ValidationError(f"prompt out of bounds: ({kp.cell_x}, {kp.cell_y}) in {w}x{h} grid")
        tracks.append(Track(i, kp.cls, 0, [(kp.cell_x, kp.cell_y)], bank[kp.cell_y, kp.cell_x].copy(), [1.0]))

    for t in range(1, len(frames)):
        bank = patch_bank(frames[t], cfg.patch_radius)
        for tr in tracks:
            cell, sim = _search(bank, tr.reference, tr.last_known(), cfg.search_radius)
            tr.positions.append(cell if sim >= cfg.similarity_floor else None)
            tr.similarity.append(sim)
        if detector is not None and cfg.reprompt_every > 0 and t % cfg.reprompt_every == 0:
            tracks = re_prompt(tracks, detector(t, frames[t]), t, cfg, frames[t])
    return tracks


def re_prompt(
    tracks: list[Track],
    detections: list[Keypoint],
    k: int,
    cfg: TrackConfig,
    frame: np.ndarray | FeatureMap,
) -> list[Track]:
    """Merge frame-``k`` detections into ``tracks``; returns a new list.

    Detections are taken in descending score order. Each one re-anchors the
    nearest same-class track within ``cfg.match_radius`` (Chebyshev) that has
    not been re-anchored yet; otherwise it starts a new track born at ``k``.
    """
    out = copy.deepcopy(tracks)
    if not detections:
        return out
    data = frame.data if isinstance(frame, FeatureMap) else np.asarray(frame)
    bank = patch_bank(data, cfg.patch_radius)
    taken: set[int] = set()
    next_id = max((t.id for t in out), default=-1) + 1
    for det in sorted(detections, key=lambda d: (-d.score, d.cell_y, d.cell_x)):
        cell = (det.cell_x, det.cell_y)
        best, best_key = None, None
        for tr in out:
            if tr.id in taken or tr.cls != det.cls or tr.born_frame > k:
                continue
            px, py = tr.last_known(k)
            cheb = max(abs(px - cell[0]), abs(py - cell[1]))
            if cheb > cfg.match_radius:
                continue
            key = (cheb, (px - cell[0]) ** 2 + (py - cell[1]) ** 2, tr.id)
            if best_key is None or key < best_key:
                best, best_key = tr, key
        ref = bank[cell[1], cell[0]].copy()
        if best is None:
            out.append(Track(next_id, det.cls, k, [cell], ref, [1.0]))
            next_id += 1
            continue
        i = k - best.born_frame
        while len(best.positions) <= i:
            best.positions.append(None)
            best.similarity.append(float("nan"))
        best.positions[i] = cell
        best.similarity[i] = 1.0
        best.reference = ref
        taken.add(best.id)
    return out


def write_tracks(path: str | Path, tracks: list[Track]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(TRACK_HEADER)
        for tr in sorted(tracks, key=lambda t: t.id):
            for i, pos in enumerate(tr.positions):
                if pos is None:
                    out.writerow([tr.id, tr.cls, tr.born_frame + i, "", "", 0])
                else:
                    out.writerow([tr.id, tr.cls, tr.born_frame + i, pos[0], pos[1], 1])


def import_external_tracks(path: str | Path, grid: tuple[int, int] | None = None) -> list[Track]:
    """Read a track CSV (ours or an external tracker's); the header row is optional.

    ``grid`` as ``(width, height)`` enables bounds checking of positions.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0] == TRACK_HEADER:
        rows = rows[1:]
    by_id: dict[int, list[tuple[int, str, Cell | None]]] = {}
    for lineno, row in enumerate(rows, start=1):
        if len(row) != len(TRACK_HEADER):
            raise FormatError(f"{path}: row {lineno}: expected {len(TRACK_HEADER)} fields, got {len(row)}")
        try:
            tid, cls, frame = int(row[0]), row[1], int(row[2])
            class_index(cls)
            vis = {"0": False, "1": True}[row[5]]
        except (ValueError, KeyError):
            raise FormatError(f"{path}: row {lineno}: malformed row {row}") from None
        has_pos = row[3] != "" and row[4] != ""
        if vis != has_pos or (row[3] == "") != (row[4] == ""):
            raise FormatError(f"{path}: row {lineno}: visibility/position inconsistency")
        pos = None
        if has_pos:
            try:
                pos = (int(row[3]), int(row[4]))
            except ValueError:
                raise FormatError(f"{path}: row {lineno}: malformed position") from None
            if pos[0] < 0 or pos[1] < 0 or (grid is not None and (pos[0] >= grid[0] or pos[1] >= grid[1])):
                raise FormatError(f"{path}: row {lineno}: position {pos} out of bounds")
        by_id.setdefault(tid, []).append((frame, cls, pos))

    tracks = []
    for tid in sorted(by_id):
        entries = sorted(by_id[tid], key=lambda e: e[0])
        frames = [e[0] for e in entries]
        if frames != list(range(frames[0], frames[0] + len(frames))):
            raise FormatError(f"{path}: track {tid} frames are not contiguous")
        if len({e[1] for e in entries}) != 1:
            raise FormatError(f"{path}: track {tid} changes class")
        tracks.append(Track(tid, entries[0][1], frames[0], [e[2] for e in entries]))
    return tracks
