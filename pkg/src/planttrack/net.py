"""Multi-stage convolutional heatmap predictor with hand-written backprop.

Each stage is three same-padded convolutions (in -> h -> h -> 2) with ReLU
after the first two. Stage 1 sees the feature grid; every later stage sees the
feature grid concatenated with the previous stage's two output maps, so
gradients of a late stage's loss reach earlier stages through that channel.

Arrays are channels-last: features ``(N, H, W, C)``, predictions
``(N, H, W, 2)``. Kernels are ``(out, in, k, k)`` and applied as
cross-correlation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from planttrack.errors import ValidationError

OUT_CHANNELS = 2


@dataclass
class ConvLayer:
    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ValidationError(f"kernel must be (out, in, k, k), got {self.kernel.shape}")
        if self.kernel.shape[2] % 2 != 1:
            raise ValidationError(f"kernel size must be odd, got {self.kernel.shape[2]}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValidationError(f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]


@dataclass
class Stage:
    layers: list[ConvLayer]

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ValidationError(f"a stage has exactly 3 conv layers, got {len(self.layers)}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ValidationError("stage layer channel plan is inconsistent")
        if self.layers[-1].out_channels != OUT_CHANNELS:
            raise ValidationError(f"final layer must emit {OUT_CHANNELS} channels")


@dataclass
class NetworkParams:
    stages: list[Stage] = field(default_factory=list)

    def __post_init__(self):
        if not self.stages:
            raise ValidationError("network needs at least one stage")
        f = self.stages[0].layers[0].in_channels
        for t, stage in enumerate(self.stages):
            want = f if t == 0 else f + OUT_CHANNELS
            if stage.layers[0].in_channels != want:
                raise ValidationError(f"stage {t + 1} expects {want} input channels, got {stage.layers[0].in_channels}")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def channels(self) -> int:
        return self.stages[0].layers[0].in_channels

    @property
    def hidden(self) -> int:
        return self.stages[0].layers[0].out_channels

    @property
    def kernel_size(self) -> int:
        return self.stages[0].layers[0].kernel.shape[2]

    def arrays(self) -> list[np.ndarray]:
        """Flat ``[kernel, bias, kernel, bias, ...]`` view in stage/layer order."""
        out = []
        for stage in self.stages:
            for layer in stage.layers:
                out += [layer.kernel, layer.bias]
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "NetworkParams":
        it = iter(arrays)
        return NetworkParams([Stage([ConvLayer(next(it), next(it)) for _ in s.layers]) for s in self.stages])

    def astype(self, dtype) -> "NetworkParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def zeros_like(self) -> "NetworkParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])


def init_params(
    channels: int,
    stages: int = 2,
    hidden: int = 16,
    kernel_size: int = 3,
    rng: np.random.Generator | int = 0,
    dtype=np.float32,
) -> NetworkParams:
    """Uniform(-s, s) kernels with ``s = sqrt(6 / fan_in)``; zero biases."""
    if stages < 1 or hidden < 1 or channels < 1:
        raise ValidationError("stages, hidden and channels must all be >= 1")
    if kernel_size % 2 != 1:
        raise ValidationError(f"kernel size must be odd, got {kernel_size}")
    rng = np.random.default_rng(rng)
    out = []
    for t in range(stages):
        c_in = channels if t == 0 else channels + OUT_CHANNELS
        layers = []
        for a, b in ((c_in, hidden), (hidden, hidden), (hidden, OUT_CHANNELS)):
            s = np.sqrt(6.0 / (a * kernel_size * kernel_size))
            kernel = rng.uniform(-s, s, size=(b, a, kernel_size, kernel_size)).astype(dtype)
            layers.append(ConvLayer(kernel, np.zeros(b, dtype=dtype)))
        out.append(Stage(layers))
    return NetworkParams(out)


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """``(N, H, W, C)`` -> ``(N*H*W, C*k*k)`` patches with zero 'same' padding."""
    p = k // 2
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, C, k, k)
    return win.reshape(n * h * w, c * k * k)


def col2im(dcols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    n, h, w, c = shape
    p = k // 2
    d = dcols.reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + h, j : j + w, :] += d[..., i, j]
    return dxp[:, p : p + h, p : p + w, :]


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValidationError(f"expected (H, W, C) or (N, H, W, C) array, got shape {x.shape}")


@dataclass
class _LayerCache:
    cols: list[np.ndarray]  # one block per input group (features / previous prediction)
    active: np.ndarray | None  # ReLU mask, None for the output layer


def _conv(cols: list[np.ndarray], layer: ConvLayer, shape: tuple[int, int, int]) -> np.ndarray:
    n, h, w = shape
    kk = layer.kernel.shape[2] ** 2
    out = None
    start = 0
    for block in cols:
        width = block.shape[1] // kk
        kmat = layer.kernel[:, start : start + width].reshape(layer.out_channels, -1)
        part = block @ kmat.T
        out = part if out is None else out + part
        start += width
    out += layer.bias
    return out.reshape(n, h, w, layer.out_channels)


def _forward(params: NetworkParams, x: np.ndarray) -> tuple[list[np.ndarray], list[list[_LayerCache]]]:
    if x.shape[-1] != params.channels:
        raise ValidationError(f"channel mismatch: features have {x.shape[-1]}, network expects {params.channels}")
    x = x.astype(params.stages[0].layers[0].kernel.dtype, copy=False)
    n, h, w, _ = x.shape
    k = params.kernel_size
    feat_cols = im2col(x, k)
    preds, caches = [], []
    prev = None
    for stage in params.stages:
        cols = [feat_cols] if prev is None else [feat_cols, im2col(prev, k)]
        stage_cache = []
        for li, layer in enumerate(stage.layers):
            z = _conv(cols, layer, (n, h, w))
            if li < len(stage.layers) - 1:
                active = z > 0
                stage_cache.append(_LayerCache(cols, active))
                cols = [im2col(np.where(active, z, 0).astype(z.dtype), k)]
            else:
                stage_cache.append(_LayerCache(cols, None))
                prev = z
        preds.append(prev)
        caches.append(stage_cache)
    return preds, caches


def forward(params: NetworkParams, features: np.ndarray) -> list[np.ndarray]:
    """Per-stage predictions; channel 0 is the leaf map, channel 1 the fruit map.

    Accepts a single ``(H, W, C)`` grid or a batch ``(N, H, W, C)`` and returns
    predictions with the same batchness.
    """
    x, single = _as_batch(features)
    preds, _ = _forward(params, x)
    return [p[0] for p in preds] if single else preds


@dataclass
class LossReport:
    stages: list[float]
    leaf: list[float]
    fruit: list[float]
    total: float


def _loss_terms(pred: np.ndarray, gt: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    pred, _ = _as_batch(pred)
    gt, _ = _as_batch(gt)
    weights, _ = _as_batch(weights)
    if not (pred.shape == gt.shape == weights.shape) or pred.shape[-1] != OUT_CHANNELS:
        raise ValidationError(
            f"dimension mismatch: pred {pred.shape}, gt {gt.shape}, weights {weights.shape}"
        )
    r = gt.astype(np.float64) - pred.astype(np.float64)
    sq = weights.astype(np.float64) * r * r
    n = pred.shape[0]
    return float(sq[..., 0].sum()) / n, float(sq[..., 1].sum()) / n


def stage_loss(pred: np.ndarray, gt: np.ndarray, weights: np.ndarray) -> float:
    """Per-pixel masked squared error summed over cells and averaged over the batch."""
    leaf, fruit = _loss_terms(pred, gt, weights)
    return leaf + fruit


def total_loss(preds: list[np.ndarray], gt: np.ndarray, weights: np.ndarray) -> LossReport:
    if not preds:
        raise ValidationError("need at least one stage prediction")
    stages, leaf, fruit = [], [], []
    total = 0.0
    for p in preds:
        a, b = _loss_terms(p, gt, weights)
        lt = a + b
        stages.append(lt)
        leaf.append(a)
        fruit.append(b)
        total += lt
    return LossReport(stages, leaf, fruit, total)


def backward(
    params: NetworkParams, features: np.ndarray, gt: np.ndarray, weights: np.ndarray
) -> tuple[LossReport, NetworkParams]:
    """Total loss and its exact gradient with respect to every kernel and bias."""
    x, _ = _as_batch(features)
    gt, _ = _as_batch(gt)
    weights, _ = _as_batch(weights)
    preds, caches = _forward(params, x)
    report = total_loss(preds, gt, weights)

    n, h, w, _ = x.shape
    k = params.kernel_size
    f = params.channels
    dtype = preds[0].dtype
    w64 = weights.astype(np.float64)
    gt64 = gt.astype(np.float64)
    grads: list[Stage] = [None] * params.num_stages
    carry = None
    for t in reversed(range(params.num_stages)):
        stage, cache = params.stages[t], caches[t]
        dz = (2.0 * w64 * (preds[t].astype(np.float64) - gt64) / n).astype(dtype)
        if carry is not None:
            dz = dz + carry
        layer_grads = [None] * len(stage.layers)
        for li in reversed(range(len(stage.layers))):
            layer, lc = stage.layers[li], cache[li]
            d2 = dz.reshape(n * h * w, layer.out_channels)
            dk = np.concatenate(
                [(d2.T @ block).reshape(layer.out_channels, -1, k, k) for block in lc.cols], axis=1
            )
            layer_grads[li] = ConvLayer(dk, d2.sum(axis=0))
            if li > 0:
                kmat = layer.kernel.reshape(layer.out_channels, -1)
                da = col2im(d2 @ kmat, (n, h, w, layer.in_channels), k)
                dz = da * cache[li - 1].active
            elif t > 0:
                # only the previous-prediction channels need an input gradient
                kmat = layer.kernel[:, f:].reshape(layer.out_channels, -1)
                carry = col2im(d2 @ kmat, (n, h, w, OUT_CHANNELS), k)
        grads[t] = Stage(layer_grads)
    return report, NetworkParams(grads)
