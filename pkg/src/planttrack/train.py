"""Training loop and the on-disk model format.

A model directory holds ``model.json`` (config, architecture, per-channel
standardization statistics, layer index) and one ``.pttn`` file per conv
layer. Each layer file is an ``(out, in*k*k + 1)`` matrix: the flattened
kernel with the bias appended as the last column.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from planttrack.errors import FormatError, NumericalError, ValidationError
from planttrack.features import FeatureMap, load_array, save_array
from planttrack.net import ConvLayer, NetworkParams, Stage, backward, forward, init_params
from planttrack.optim import OptimizerConfig, OptimizerState, optimizer_step
from planttrack.synthetic import Sample

log = logging.getLogger(__name__)

MODEL_FORMAT = "planttrack-model"
MODEL_VERSION = 1
STD_FLOOR = 1e-6


@dataclass
class TrainConfig:
    stages: int = 2
    hidden: int = 16
    kernel_size: int = 3
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        if self.stages < 1 or self.hidden < 1:
            raise ValidationError("stages and hidden must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValidationError("kernel size must be odd")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Model:
    params: NetworkParams
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def channels(self) -> int:
        return self.params.channels

    def prepare(self, features) -> np.ndarray:
        x = features.data if isinstance(features, FeatureMap) else np.asarray(features, dtype=np.float32)
        if x.shape[-1] != self.channels:
            raise ValidationError(f"channel mismatch: features have {x.shape[-1]}, model expects {self.channels}")
        if self.mean is None:
            return x
        return ((x - self.mean) / self.std).astype(np.float32)

    def predict(self, features) -> list[np.ndarray]:
        return forward(self.params, self.prepare(features))

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        layers = []
        for t, stage in enumerate(self.params.stages):
            for li, layer in enumerate(stage.layers):
                name = f"stage{t + 1}_layer{li + 1}.pttn"
                mat = np.concatenate([layer.kernel.reshape(layer.out_channels, -1), layer.bias[:, None]], axis=1)
                save_array(directory / name, mat)
                layers.append({"stage": t + 1, "layer": li + 1, "file": name,
                               "in": layer.in_channels, "out": layer.out_channels})
        stats = None
        if self.mean is not None:
            stats = {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}
        doc = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": self.config.to_dict(),
            "T": self.params.num_stages,
            "h": self.params.hidden,
            "k": self.params.kernel_size,
            "f": self.params.channels,
            "standardization": stats,
            "layers": layers,
        }
        (directory / "model.json").write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Model":
        directory = Path(directory)
        try:
            doc = json.loads((directory / "model.json").read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{directory}/model.json: invalid JSON ({exc})") from None
        if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
            raise FormatError(f"{directory}: not a version {MODEL_VERSION} planttrack model")
        k = int(doc["k"])
        stages: dict[int, list[ConvLayer]] = {}
        for entry in sorted(doc["layers"], key=lambda e: (e["stage"], e["layer"])):
            mat = load_array(directory / entry["file"])
            out, cin = int(entry["out"]), int(entry["in"])
            if mat.shape != (out, cin * k * k + 1):
                raise FormatError(f"{entry['file']}: shape {mat.shape} does not match ({out}, {cin * k * k + 1})")
            layer = ConvLayer(mat[:, :-1].reshape(out, cin, k, k).copy(), mat[:, -1].copy())
            stages.setdefault(entry["stage"], []).append(layer)
        params = NetworkParams([Stage(stages[t]) for t in sorted(stages)])
        stats = doc.get("standardization")
        mean = std = None
        if stats is not None:
            mean = np.asarray(stats["mean"], dtype=np.float32)
            std = np.asarray(stats["std"], dtype=np.float32)
        return cls(params, mean, std, TrainConfig(**doc["config"]))


@dataclass
class EpochRecord:
    epoch: int
    total: float
    stages: list[float]


def channel_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and floored std over every cell of every sample (float64 accumulation)."""
    flat = features.reshape(-1, features.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return mean.astype(np.float32), std.astype(np.float32)


def stack_samples(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([s.features.data for s in samples])
    gt = np.stack([s.targets() for s in samples])
    w = np.stack([s.weights() for s in samples])
    return x, gt, w


def train(samples: list[Sample], cfg: TrainConfig) -> tuple[Model, list[EpochRecord]]:
    """Fit a cascade on ``samples``; returns the model and a per-epoch loss curve.

    Each epoch's entry is the sample-weighted mean of the batch losses seen
    during that epoch (computed before each update).
    """
    if not samples:
        raise ValidationError("empty dataset")
    x, gt, w = stack_samples(samples)
    mean = std = None
    if cfg.standardize:
        mean, std = channel_stats(x)
        x = ((x - mean) / std).astype(np.float32)
    params = init_params(x.shape[-1], cfg.stages, cfg.hidden, cfg.kernel_size, np.random.default_rng([cfg.seed, 0]))
    order_rng = np.random.default_rng([cfg.seed, 1])
    state = OptimizerState()
    n = len(samples)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        total = 0.0
        per_stage = np.zeros(cfg.stages)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            report, grads = backward(params, x[idx], gt[idx], w[idx])
            if not np.isfinite(report.total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            params, state = optimizer_step(params, grads, state, cfg.optimizer)
            total += report.total * len(idx)
            per_stage += np.asarray(report.stages) * len(idx)
        curve.append(EpochRecord(epoch, total / n, [float(v) for v in per_stage / n]))
        if epoch == 1 or epoch % 25 == 0 or epoch == cfg.epochs:
            log.info("epoch %d loss %.6g", epoch, total / n)
    return Model(params, mean, std, cfg), curve


def write_loss_curve(path: str | Path, curve: list[EpochRecord]) -> None:
    stages = len(curve[0].stages) if curve else 0
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["epoch", "total_loss"] + [f"stage_{t + 1}" for t in range(stages)])
        for rec in curve:
            out.writerow([rec.epoch, repr(rec.total)] + [repr(v) for v in rec.stages])
