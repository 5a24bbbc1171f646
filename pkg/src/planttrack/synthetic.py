"""Procedural plant scenes rendered into feature grids and keypoint labels.

A scene is a handful of leaf and fruit centers scattered in a cylinder around
the world origin. A pinhole camera looks at it; each projected keypoint gets a
3x3-ish blob of its class signature in the feature grid, a Gaussian bump in its
class heatmap, and (if it is marked unlabeled) a hole in the loss weight mask.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from planttrack.errors import FormatError, ValidationError
from planttrack.features import (
    DEFAULT_FACTOR,
    FeatureMap,
    apply_depth_mask,
    load_array,
    mask_for_features,
    save_array,
)

CLASSES = ("leaf", "fruit")
MANIFEST_VERSION = 1


def class_index(name: str) -> int:
    try:
        return CLASSES.index(name)
    except ValueError:
        raise ValidationError(f"unknown class {name!r}, expected one of {CLASSES}") from None


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be > 0, got fx={self.fx}, fy={self.fy}")
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ValidationError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValidationError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def to_camera(self, point) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=np.float64) + self.translation


def project(point, cam: CameraModel) -> tuple[float, float] | None:
    """Project a world point to pixel coordinates; ``None`` when behind the camera."""
    p = cam.to_camera(point)
    if p[2] <= 1e-9:
        return None
    return (cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy)


def pixel_to_cell(px: float, py: float, factor: int = DEFAULT_FACTOR) -> tuple[int, int]:
    return (math.floor(px / factor), math.floor(py / factor))


def cell_to_pixel(cx: int, cy: int, factor: int = DEFAULT_FACTOR) -> tuple[int, int]:
    return (factor * cx + factor // 2, factor * cy + factor // 2)


def render_heatmap(keypoints: Iterable[tuple[float, float]], w: int, h: int, sigma: float) -> np.ndarray:
    """Max-combined unnormalized Gaussians, shape ``(h, w)``, peak 1.0 at each keypoint."""
    if not sigma > 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w), dtype=np.float64)
    for kx, ky in keypoints:
        g = np.exp(-((xs - kx) ** 2 + (ys - ky) ** 2) / (2.0 * sigma * sigma))
        np.maximum(out, g, out=out)
    return out.astype(np.float32)


def render_weight_mask(
    labeled: Iterable[tuple[int, int]],
    unlabeled: Iterable[tuple[int, int]],
    w: int,
    h: int,
    radius: float,
) -> np.ndarray:
    """Loss weights: ones, with closed disks of ``radius`` zeroed around unlabeled keypoints.

    ``labeled`` does not affect the result; it is accepted so callers can pass
    both keypoint groups symmetrically.
    """
    if radius < 0:
        raise ValidationError(f"radius must be >= 0, got {radius}")
    ys, xs = np.mgrid[0:h, 0:w]
    mask = np.ones((h, w), dtype=np.uint8)
    for kx, ky in unlabeled:
        mask[(xs - kx) ** 2 + (ys - ky) ** 2 <= radius * radius] = 0
    return mask


@dataclass
class GenConfig:
    image_width: int = 224
    image_height: int = 224
    channels: int = 384
    factor: int = DEFAULT_FACTOR
    leaf_count: tuple[int, int] = (3, 6)
    fruit_count: tuple[int, int] = (1, 3)
    sigma: float = 1.5
    unlabeled_fraction: float = 0.2
    mask_radius: float = 3.0
    noise_std: float = 0.05
    signature_seed: int = 0
    # None: background signature comes from signature_seed like the class ones
    background_seed: int | None = None
    focal: float = 280.0
    camera_distance: tuple[float, float] = (0.9, 1.1)
    plant_radius: float = 0.35
    plant_height: float = 0.35
    background_depth: tuple[float, float] = (1.5, 3.0)
    min_separation: int = 4
    near: float = 0.1
    far: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.leaf_count = tuple(self.leaf_count)
        self.fruit_count = tuple(self.fruit_count)
        self.camera_distance = tuple(self.camera_distance)
        self.background_depth = tuple(self.background_depth)
        if not self.sigma > 0:
            raise ValidationError("sigma must be > 0")
        if self.factor < 1:
            raise ValidationError("downscale factor must be >= 1")
        if not 0 <= self.unlabeled_fraction < 1:
            raise ValidationError("unlabeled fraction must be in [0, 1)")
        if self.channels < 1:
            raise ValidationError("channels must be >= 1")
        if self.image_width < self.factor or self.image_height < self.factor:
            raise ValidationError("image smaller than one feature cell")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        for name in ("leaf_count", "fruit_count"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValidationError(f"{name} must satisfy 0 <= lo <= hi")

    @property
    def grid(self) -> tuple[int, int]:
        """Feature grid size as ``(width, height)`` in cells."""
        return self.image_width // self.factor, self.image_height // self.factor

    def signatures(self) -> dict[str, np.ndarray]:
        """Unit feature vectors for ``leaf``, ``fruit`` and ``background``."""
        rng = np.random.default_rng([self.signature_seed, 0])
        sigs = {}
        for name in CLASSES:
            v = rng.standard_normal(self.channels)
            sigs[name] = v / np.linalg.norm(v)
        bseed = self.signature_seed if self.background_seed is None else self.background_seed
        v = np.random.default_rng([bseed, 1]).standard_normal(self.channels)
        sigs["background"] = v / np.linalg.norm(v)
        return sigs

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclass(frozen=True)
class SceneKeypoint:
    position: tuple[float, float, float]
    cls: str
    labeled: bool = True


@dataclass
class PlantScene:
    keypoints: list[SceneKeypoint]
    background_depth: float
    seed: int = 0

    def __post_init__(self):
        if not self.keypoints:
            raise ValidationError("scene needs at least one keypoint")
        for kp in self.keypoints:
            if not np.all(np.isfinite(kp.position)):
                raise ValidationError("keypoint positions must be finite")
            class_index(kp.cls)


@dataclass
class ViewKeypoint:
    """A scene keypoint as seen from one camera: feature cell plus camera depth."""

    cell_x: int
    cell_y: int
    cls: str
    labeled: bool
    depth: float


@dataclass
class Sample:
    features: FeatureMap
    heatmap_leaf: np.ndarray
    heatmap_fruit: np.ndarray
    mask_leaf: np.ndarray
    mask_fruit: np.ndarray
    gt_keypoints: list[tuple[int, int, str]]
    # all in-view keypoints, labeled or not; evaluation ground truth
    all_keypoints: list[ViewKeypoint] = field(default_factory=list)

    def __post_init__(self):
        shape = (self.features.height, self.features.width)
        for name in ("heatmap_leaf", "heatmap_fruit", "mask_leaf", "mask_fruit"):
            grid = np.asarray(getattr(self, name))
            if grid.shape != shape:
                raise ValidationError(f"{name} shape {grid.shape} != feature grid {shape}")
        for name in ("heatmap_leaf", "heatmap_fruit"):
            grid = getattr(self, name)
            if np.any(grid < 0) or np.any(grid > 1):
                raise ValidationError(f"{name} values must lie in [0, 1]")
        for name in ("mask_leaf", "mask_fruit"):
            if not np.all(np.isin(getattr(self, name), (0, 1))):
                raise ValidationError(f"{name} values must be 0 or 1")
        for x, y, cls in self.gt_keypoints:
            if not (0 <= x < shape[1] and 0 <= y < shape[0]):
                raise ValidationError(f"keypoint ({x}, {y}) outside {shape[1]}x{shape[0]} grid")

    def targets(self) -> np.ndarray:
        """Ground-truth heatmaps stacked as ``(h, w, 2)`` in leaf, fruit order."""
        return np.stack([self.heatmap_leaf, self.heatmap_fruit], axis=-1).astype(np.float32)

    def weights(self) -> np.ndarray:
        return np.stack([self.mask_leaf, self.mask_fruit], axis=-1).astype(np.float32)


def _rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def sample_camera(cfg: GenConfig, rng: np.random.Generator) -> CameraModel:
    yaw = rng.uniform(-math.pi, math.pi)
    dist = rng.uniform(*cfg.camera_distance)
    return CameraModel(
        fx=cfg.focal,
        fy=cfg.focal,
        cx=cfg.image_width / 2.0,
        cy=cfg.image_height / 2.0,
        rotation=_rot_y(yaw),
        translation=np.array([0.0, 0.0, dist]),
    )


def view_keypoints(scene: PlantScene, cam: CameraModel, cfg: GenConfig) -> list[ViewKeypoint]:
    """Keypoints that land inside the feature grid, in scene order."""
    gw, gh = cfg.grid
    out = []
    for kp in scene.keypoints:
        px = project(kp.position, cam)
        if px is None:
            continue
        cx, cy = pixel_to_cell(px[0], px[1], cfg.factor)
        if 0 <= cx < gw and 0 <= cy < gh:
            depth = float(cam.to_camera(kp.position)[2])
            out.append(ViewKeypoint(cx, cy, kp.cls, kp.labeled, depth))
    return out


def sample_scene(cfg: GenConfig, cam: CameraModel, rng: np.random.Generator, seed: int = 0) -> PlantScene:
    """Scatter keypoints so their projected cells keep ``min_separation`` (Chebyshev)."""
    gw, gh = cfg.grid
    wanted = ["leaf"] * int(rng.integers(cfg.leaf_count[0], cfg.leaf_count[1] + 1))
    wanted += ["fruit"] * int(rng.integers(cfg.fruit_count[0], cfg.fruit_count[1] + 1))
    placed: list[SceneKeypoint] = []
    cells: list[tuple[int, int]] = []
    for cls in wanted:
        for _ in range(64):
            r = cfg.plant_radius * math.sqrt(rng.uniform())
            theta = rng.uniform(0.0, 2.0 * math.pi)
            pos = (r * math.cos(theta), rng.uniform(-cfg.plant_height, cfg.plant_height), r * math.sin(theta))
            px = project(pos, cam)
            if px is None:
                continue
            c = pixel_to_cell(px[0], px[1], cfg.factor)
            if not (0 <= c[0] < gw and 0 <= c[1] < gh):
                continue
            if any(max(abs(c[0] - o[0]), abs(c[1] - o[1])) < cfg.min_separation for o in cells):
                continue
            labeled = bool(rng.uniform() >= cfg.unlabeled_fraction)
            placed.append(SceneKeypoint(pos, cls, labeled))
            cells.append(c)
            break
    if not placed:
        raise ValidationError("could not place any keypoint in view")
    return PlantScene(placed, float(rng.uniform(*cfg.background_depth)), seed)


def synthesize_features(
    scene: PlantScene, cam: CameraModel, cfg: GenConfig, rng: np.random.Generator
) -> tuple[FeatureMap, np.ndarray]:
    """Raw (unmasked) feature grid and pixel-resolution depth for one view.

    Cells within ``sigma`` of a projected keypoint carry that keypoint's class
    signature and depth; everything else carries the background signature and
    the scene's background depth. Gaussian noise is added to every channel.
    """
    visible = view_keypoints(scene, cam, cfg)
    if not visible:
        raise ValidationError("empty scene in view")
    gw, gh = cfg.grid
    sigs = cfg.signatures()
    ys, xs = np.mgrid[0:gh, 0:gw]
    owner = np.full((gh, gw), -1, dtype=np.int64)
    best = np.full((gh, gw), np.inf)
    for i, kp in enumerate(visible):
        d2 = (xs - kp.cell_x) ** 2 + (ys - kp.cell_y) ** 2
        take = (d2 <= cfg.sigma**2) & (d2 < best)
        owner[take] = i
        best[take] = d2[take]

    base = np.empty((gh, gw, cfg.channels), dtype=np.float64)
    base[:] = sigs["background"]
    cell_depth = np.full((gh, gw), scene.background_depth, dtype=np.float64)
    for i, kp in enumerate(visible):
        sel = owner == i
        base[sel] = sigs[kp.cls]
        cell_depth[sel] = kp.depth
    feats = base.astype(np.float32)
    if cfg.noise_std > 0:
        feats += rng.normal(0.0, cfg.noise_std, size=feats.shape).astype(np.float32)

    depth = np.full((cfg.image_height, cfg.image_width), scene.background_depth, dtype=np.float32)
    f = cfg.factor
    depth[: gh * f, : gw * f] = np.repeat(np.repeat(cell_depth, f, axis=0), f, axis=1)
    return FeatureMap(feats), depth


def render_labels(visible: Sequence[ViewKeypoint], cfg: GenConfig) -> dict[str, np.ndarray]:
    gw, gh = cfg.grid
    out = {}
    for cls in CLASSES:
        lab = [(k.cell_x, k.cell_y) for k in visible if k.cls == cls and k.labeled]
        unl = [(k.cell_x, k.cell_y) for k in visible if k.cls == cls and not k.labeled]
        out[f"heatmap_{cls}"] = render_heatmap(lab, gw, gh, cfg.sigma)
        out[f"mask_{cls}"] = render_weight_mask(lab, unl, gw, gh, cfg.mask_radius)
    return out


@dataclass
class RenderedView:
    """Everything produced for one camera view before it is written to disk."""

    sample: Sample
    raw_features: FeatureMap
    depth: np.ndarray
    fg_mask: np.ndarray


def render_view(scene: PlantScene, cam: CameraModel, cfg: GenConfig, rng: np.random.Generator) -> RenderedView:
    raw, depth = synthesize_features(scene, cam, cfg, rng)
    fg = mask_for_features(depth, (raw.height, raw.width), cfg.near, cfg.far)
    visible = view_keypoints(scene, cam, cfg)
    labels = render_labels(visible, cfg)
    sample = Sample(
        features=apply_depth_mask(raw, fg),
        gt_keypoints=[(k.cell_x, k.cell_y, k.cls) for k in visible if k.labeled],
        all_keypoints=visible,
        **labels,
    )
    return RenderedView(sample, raw, depth, fg)


def make_view(cfg: GenConfig, seed: int) -> RenderedView:
    """Draw camera, scene and noise from one seeded stream."""
    rng = np.random.default_rng(seed)
    cam = sample_camera(cfg, rng)
    scene = sample_scene(cfg, cam, rng, seed)
    return render_view(scene, cam, cfg, rng)


_LABEL_FILES = ("heatmap_leaf", "heatmap_fruit", "mask_leaf", "mask_fruit")


def write_view(view: RenderedView, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    view.raw_features.save(directory / "features.pttn")
    save_array(directory / "depth.pttn", view.depth)
    save_array(directory / "mask.pttn", view.fg_mask)
    s = view.sample
    for name in _LABEL_FILES:
        save_array(directory / f"{name}.pttn", getattr(s, name))


def _keypoint_records(keypoints: Iterable[ViewKeypoint]) -> list[dict]:
    return [
        {"cell_x": k.cell_x, "cell_y": k.cell_y, "class": k.cls, "labeled": k.labeled}
        for k in keypoints
    ]


def write_manifest(path: Path, cfg: GenConfig, entries: list[dict]) -> None:
    doc = {"version": MANIFEST_VERSION, "cfg": cfg.to_dict(), "samples": entries}
    path.write_text(json.dumps(doc, indent=2) + "\n")


def generate_dataset(cfg: GenConfig, n: int = 20, out_dir: str | Path | None = None, seed: int | None = None) -> list[Sample]:
    """Generate ``n`` samples; sample ``i`` uses seed ``seed + i``.

    When ``out_dir`` is given, each sample goes to ``out_dir/sample_XXX/`` and
    a ``manifest.json`` indexes them.
    """
    if n < 1:
        raise ValidationError(f"sample count must be >= 1, got {n}")
    seed = cfg.seed if seed is None else seed
    samples, entries = [], []
    for i in range(n):
        view = make_view(cfg, seed + i)
        samples.append(view.sample)
        name = f"sample_{i:03d}"
        if out_dir is not None:
            write_view(view, Path(out_dir) / name)
        entries.append({"dir": name, "seed": seed + i, "keypoints": _keypoint_records(view.sample.all_keypoints)})
    if out_dir is not None:
        write_manifest(Path(out_dir) / "manifest.json", cfg, entries)
    return samples


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if doc.get("version") != MANIFEST_VERSION or "samples" not in doc:
        raise FormatError(f"{path}: not a version {MANIFEST_VERSION} manifest")
    return doc


def _manifest_keypoints(entry: dict) -> list[ViewKeypoint]:
    try:
        return [
            ViewKeypoint(int(k["cell_x"]), int(k["cell_y"]), k["class"], bool(k["labeled"]), float("nan"))
            for k in entry["keypoints"]
        ]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest keypoint entry: {exc}") from None


def load_sample_dir(directory: str | Path, near: float, far: float) -> tuple[FeatureMap, np.ndarray]:
    """Foreground features for a sample directory plus the cell mask used.

    ``mask.pttn`` wins when present; otherwise the mask is derived from
    ``depth.pttn``; with neither, every cell is foreground.
    """
    directory = Path(directory)
    raw = FeatureMap.load(directory / "features.pttn")
    if (directory / "mask.pttn").exists():
        fg = load_array(directory / "mask.pttn")
    elif (directory / "depth.pttn").exists():
        fg = mask_for_features(load_array(directory / "depth.pttn"), (raw.height, raw.width), near, far)
    else:
        fg = np.ones((raw.height, raw.width), dtype=np.uint8)
    return apply_depth_mask(raw, fg), fg


def load_dataset(directory: str | Path) -> list[Sample]:
    directory = Path(directory)
    doc = read_manifest(directory)
    cfg = doc.get("cfg", {})
    near = cfg.get("near", 0.1)
    far = cfg.get("far", 2.0)
    samples = []
    for entry in doc["samples"]:
        sdir = directory / entry["dir"]
        feats, _ = load_sample_dir(sdir, near, far)
        labels = {name: load_array(sdir / f"{name}.pttn") for name in _LABEL_FILES}
        kps = _manifest_keypoints(entry)
        samples.append(
            Sample(
                features=feats,
                gt_keypoints=[(k.cell_x, k.cell_y, k.cls) for k in kps if k.labeled],
                all_keypoints=kps,
                **labels,
            )
        )
    return samples


@dataclass
class RenderedSequence:
    """A rendered frame sequence with per-frame ground truth cells."""

    frames: list[FeatureMap]
    raw_frames: list[FeatureMap]
    depths: list[np.ndarray]
    # truth[i][frame] -> (cell_x, cell_y) or None when out of view
    truth: list[list[tuple[int, int] | None]]
    classes: list[str]


def generate_sequence(cfg: GenConfig, n_frames: int, seed: int, step: float = 0.005) -> RenderedSequence:
    """Render one scene from a camera sliding sideways by ``step`` metres per frame.

    Every frame draws fresh feature noise; the scene and signatures stay fixed.
    """
    if n_frames < 1:
        raise ValidationError("sequence needs at least one frame")
    rng = np.random.default_rng(seed)
    cam0 = sample_camera(cfg, rng)
    scene = sample_scene(cfg, cam0, rng, seed)
    frames, raws, depths = [], [], []
    truth: list[list[tuple[int, int] | None]] = [[] for _ in scene.keypoints]
    gw, gh = cfg.grid
    for t in range(n_frames):
        cam = dataclasses.replace(cam0, translation=cam0.translation + np.array([step * t, 0.0, 0.0]))
        for i, kp in enumerate(scene.keypoints):
            px = project(kp.position, cam)
            cell = None if px is None else pixel_to_cell(px[0], px[1], cfg.factor)
            if cell is not None and not (0 <= cell[0] < gw and 0 <= cell[1] < gh):
                cell = None
            truth[i].append(cell)
        view = render_view(scene, cam, cfg, rng)
        frames.append(view.sample.features)
        raws.append(view.raw_features)
        depths.append(view.depth)
    return RenderedSequence(frames, raws, depths, truth, [k.cls for k in scene.keypoints])
