"""Feature/depth/mask containers and depth-based foreground filtering.

Every grid that crosses a process boundary is stored as a ``.pttn`` tensor
file::

    offset  size      field
    0       4         magic b"PTTN"
    4       1         version (1)
    5       1         dtype code (1 = float32)
    6       1         rank (1..4)
    7       4*rank    dims, uint32 little-endian
    ...     4*prod    payload, float32 little-endian, row-major

Feature maps are rank 3 with dims ``(height, width, channels)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from planttrack.errors import FormatError, ValidationError

MAGIC = b"PTTN"
VERSION = 1
DTYPE_F32 = 1
MAX_RANK = 4

DEFAULT_FACTOR = 14
DEFAULT_NEAR = 0.1
DEFAULT_FAR = 2.0

_LE_F32 = np.dtype("<f4")


def _first_nonfinite(values: np.ndarray) -> tuple[int, ...] | None:
    bad = np.argwhere(~np.isfinite(values))
    if len(bad) == 0:
        return None
    return tuple(int(i) for i in bad[0])


def write_tensor(path: str | Path, dims: Sequence[int], data) -> None:
    """Write ``data`` (any array-like of reals) as a float32 tensor file."""
    dims = [int(d) for d in dims]
    if not 1 <= len(dims) <= MAX_RANK:
        raise ValidationError(f"rank {len(dims)} outside [1, {MAX_RANK}]")
    if any(d < 1 for d in dims):
        raise ValidationError(f"dims must be >= 1, got {dims}")
    values = np.asarray(data, dtype=np.float32).reshape(-1)
    expected = int(np.prod(dims))
    if values.size != expected:
        raise ValidationError(f"length mismatch: {values.size} != {expected}")
    bad = _first_nonfinite(values)
    if bad is not None:
        pos = np.unravel_index(bad[0], dims)
        raise ValidationError(f"non-finite value at index {tuple(int(p) for p in pos)}")
    header = MAGIC + struct.pack(f"<BBB{len(dims)}I", VERSION, DTYPE_F32, len(dims), *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.astype(_LE_F32, copy=False).tobytes())


def read_tensor(path: str | Path) -> tuple[tuple[int, ...], np.ndarray]:
    """Read a tensor file; returns ``(dims, data)`` with ``data`` shaped to ``dims``."""
    raw = Path(path).read_bytes()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise FormatError("bad magic")
    version, dtype, rank = raw[4], raw[5], raw[6]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"rank {rank} outside [1, {MAX_RANK}]")
    head = 7 + 4 * rank
    if len(raw) < head:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 7)
    if any(d < 1 for d in dims):
        raise FormatError(f"dims must be >= 1, got {list(dims)}")
    n = int(np.prod(dims))
    payload = raw[head:]
    if len(payload) < 4 * n:
        raise FormatError("truncated payload")
    if len(payload) > 4 * n:
        raise FormatError("trailing bytes after payload")
    data = np.frombuffer(payload, dtype=_LE_F32).astype(np.float32).reshape(dims)
    bad = _first_nonfinite(data)
    if bad is not None:
        raise FormatError(f"non-finite value at index {bad}")
    return tuple(int(d) for d in dims), data


def save_array(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    write_tensor(path, array.shape, array)


def load_array(path: str | Path) -> np.ndarray:
    return read_tensor(path)[1]


@dataclass(frozen=True)
class FeatureMap:
    """Dense feature grid stored as a ``(height, width, channels)`` float32 array."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValidationError(f"feature map must be rank 3 (h, w, c), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValidationError(f"feature map dims must be >= 1, got {data.shape}")
        bad = _first_nonfinite(data)
        if bad is not None:
            raise ValidationError(f"non-finite feature at {bad}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def save(self, path: str | Path) -> None:
        save_array(path, self.data)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureMap":
        data = load_array(path)
        if data.ndim != 3:
            raise FormatError(f"{path}: expected rank 3 feature tensor, got rank {data.ndim}")
        return cls(data)


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("mask values must be exactly 0 or 1")
    return mask.astype(np.uint8)


def foreground_from_depth(depth: np.ndarray, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR) -> np.ndarray:
    """Binary mask of pixels whose depth lies in the closed band ``[near, far]``."""
    if not near < far:
        raise ValidationError(f"near ({near}) must be < far ({far})")
    if near < 0:
        raise ValidationError(f"near must be >= 0, got {near}")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValidationError(f"depth map must be 2-D, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise ValidationError("depth values must be finite and >= 0")
    return ((depth >= near) & (depth <= far)).astype(np.uint8)


def downsample_mask(mask: np.ndarray, factor: int = DEFAULT_FACTOR) -> np.ndarray:
    """Block-majority reduction of a pixel mask to feature-cell resolution.

    A cell is foreground when at least half of its ``factor x factor`` pixels
    are; ragged right/bottom pixels that do not fill a block are dropped.
    """
    if factor <= 0:
        raise ValidationError(f"factor must be >= 1, got {factor}")
    mask = _check_mask(mask)
    h, w = mask.shape
    if h < factor or w < factor:
        raise ValidationError(f"mask {w}x{h} is smaller than one {factor}x{factor} block")
    ch, cw = h // factor, w // factor
    blocks = mask[: ch * factor, : cw * factor].reshape(ch, factor, cw, factor)
    ones = blocks.sum(axis=(1, 3), dtype=np.int64)
    # 2*ones >= n keeps the tie test in integers
    return (2 * ones >= factor * factor).astype(np.uint8)


def apply_depth_mask(features: FeatureMap, mask: np.ndarray) -> FeatureMap:
    mask = _check_mask(mask)
    if mask.shape != (features.height, features.width):
        raise ValidationError(
            f"dimension mismatch: features {features.width}x{features.height}, "
            f"mask {mask.shape[1]}x{mask.shape[0]}"
        )
    # where() instead of multiply so background is +0.0 even for negative features
    out = np.where(mask[:, :, None] == 1, features.data, np.float32(0.0))
    return FeatureMap(out)


def mask_for_features(
    depth: np.ndarray,
    feature_shape: tuple[int, int],
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
) -> np.ndarray:
    """Cell-resolution foreground mask for a depth map of any integer multiple resolution."""
    depth = np.asarray(depth)
    fh, fw = feature_shape
    if depth.ndim != 2:
        raise ValidationError(f"depth map must be 2-D, got shape {depth.shape}")
    factor = depth.shape[0] // fh
    if factor < 1 or depth.shape[1] // fw != factor:
        raise ValidationError(f"depth {depth.shape} is not an integer multiple of features {feature_shape}")
    px = foreground_from_depth(depth, near, far)
    cells = downsample_mask(px, factor)
    return cells[:fh, :fw]
