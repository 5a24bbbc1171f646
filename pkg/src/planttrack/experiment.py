"""End-to-end experiment: train on 20 synthetic views, test in- and out-of-distribution.

Distribution A is the training generator. Distribution B keeps the leaf and
fruit signatures but swaps in a new background signature and scales the
feature noise, standing in for a synthetic-to-real appearance gap.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from planttrack.config import RunConfig
from planttrack.errors import PlantTrackError
from planttrack.features import save_array
from planttrack.metrics import DetectionMetrics, tracking_error
from planttrack.peaks import Keypoint, detect, write_keypoints
from planttrack.synthetic import GenConfig, RenderedSequence, generate_dataset, generate_sequence
from planttrack.tracker import Track, TrackConfig, track, write_tracks
from planttrack.train import Model, train, write_loss_curve

log = logging.getLogger(__name__)

SEED_STRIDE = 10_000


class ExperimentError(PlantTrackError):
    def __init__(self, step: str, cause: Exception):
        super().__init__(f"{step}: {cause}")
        self.step = step
        self.cause = cause


def shifted_config(gen: GenConfig, background_seed: int, noise_scale: float) -> GenConfig:
    return dataclasses.replace(gen, background_seed=background_seed, noise_std=gen.noise_std * noise_scale)


def _evaluate(model: Model, samples, cfg: RunConfig, out_dir: Path) -> DetectionMetrics:
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = DetectionMetrics(cfg.experiment.match_radius)
    for i, s in enumerate(samples):
        kps = detect(model, s.features, cfg.peak)
        write_keypoints(out_dir / f"sample_{i:03d}.csv", kps)
        metrics.add(kps, [(k.cell_x, k.cell_y, k.cls) for k in s.all_keypoints])
    return metrics


def associate_tracks(tracks: list[Track], seq: RenderedSequence, radius: int) -> dict[int, list]:
    """Map each track to the ground-truth keypoint it was seeded on.

    A track is matched at its birth frame to the nearest same-class keypoint
    within Chebyshev ``radius``; unmatched tracks (spurious prompts) are left out.
    """
    out = {}
    for tr in tracks:
        cell = tr.at(tr.born_frame)
        best, best_key = None, None
        for i, truth in enumerate(seq.truth):
            t = truth[tr.born_frame]
            if t is None or seq.classes[i] != tr.cls:
                continue
            cheb = max(abs(t[0] - cell[0]), abs(t[1] - cell[1]))
            if cheb <= radius:
                key = (cheb, (t[0] - cell[0]) ** 2 + (t[1] - cell[1]) ** 2, i)
                if best_key is None or key < best_key:
                    best, best_key = i, key
        if best is not None:
            out[tr.id] = seq.truth[best]
    return out


def _run_tracking(model: Model, seq: RenderedSequence, cfg: RunConfig, tcfg: TrackConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    prompts = detect(model, seq.frames[0], cfg.peak)
    write_keypoints(out_dir / "frame_000.csv", prompts)

    def detector(t: int, frame: np.ndarray) -> list[Keypoint]:
        kps = detect(model, frame, cfg.peak)
        write_keypoints(out_dir / f"frame_{t:03d}.csv", kps)
        return kps

    tracks = track(seq.frames, prompts, tcfg, detector)
    write_tracks(out_dir / "tracks.csv", tracks)
    gt = associate_tracks(tracks, seq, cfg.experiment.match_radius)
    metrics = tracking_error(tracks, gt)
    doc = metrics.to_dict()
    doc.update({"tracks": len(tracks), "prompts": len(prompts), "scored_tracks": len(gt),
                "reprompt_every": tcfg.reprompt_every})
    return doc


def _write_sequence(seq: RenderedSequence, out_dir: Path) -> None:
    for t, (raw, depth) in enumerate(zip(seq.raw_frames, seq.depths)):
        fdir = out_dir / f"frame_{t:03d}"
        fdir.mkdir(parents=True, exist_ok=True)
        raw.save(fdir / "features.pttn")
        save_array(fdir / "depth.pttn", depth)


def _step(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PlantTrackError as exc:
        raise ExperimentError(name, exc) from exc


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def run_experiment(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Run the full protocol and write every artifact under ``out_dir``.

    Layout: ``data/{train,test_a,test_b}/``, ``sequence/``, ``model/``,
    ``loss_curve.csv``, ``detections/{a,b}/``, ``tracking/``,
    ``metrics.json``, ``report.txt``, ``config.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = cfg.experiment
    gen_a = cfg.gen
    gen_b = shifted_config(gen_a, exp.shift_background_seed, exp.noise_scale)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

    log.info("generating data")
    seed = cfg.seed
    train_set = _step("gen-data/train", generate_dataset, gen_a, exp.train_count, out / "data" / "train", seed)
    test_a = _step("gen-data/test_a", generate_dataset, gen_a, exp.test_count, out / "data" / "test_a", seed + SEED_STRIDE)
    test_b = _step("gen-data/test_b", generate_dataset, gen_b, exp.test_count, out / "data" / "test_b", seed + 2 * SEED_STRIDE)
    seq = _step("gen-data/sequence", generate_sequence, gen_a, exp.sequence_frames, seed + 3 * SEED_STRIDE, exp.sequence_step)
    _write_sequence(seq, out / "sequence")

    log.info("training on %d samples", len(train_set))
    model, curve = _step("train", train, train_set, cfg.train)
    model.save(out / "model")
    write_loss_curve(out / "loss_curve.csv", curve)

    log.info("evaluating")
    det_a = _step("eval/a", _evaluate, model, test_a, cfg, out / "detections" / "a")
    det_b = _step("eval/b", _evaluate, model, test_b, cfg, out / "detections" / "b")

    log.info("tracking")
    tracking = {"configured": _step("track", _run_tracking, model, seq, cfg, cfg.track, out / "tracking")}
    if cfg.track.reprompt_every > 0:
        plain = dataclasses.replace(cfg.track, reprompt_every=0)
        tracking["no_reprompt"] = _step("track", _run_tracking, model, seq, cfg, plain, out / "tracking_no_reprompt")

    initial, final = curve[0].total, curve[-1].total
    metrics = {
        "name": cfg.name,
        "seed": cfg.seed,
        "training": {
            "epochs": len(curve),
            "initial_loss": initial,
            "final_loss": final,
            "loss_ratio": final / initial if initial > 0 else None,
        },
        "detection": {"distribution_a": det_a.to_dict(), "distribution_b": det_b.to_dict()},
        "tracking": tracking,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")

    tr = tracking["configured"]
    lines = [
        f"experiment: {cfg.name} (seed {cfg.seed})",
        f"training: {exp.train_count} samples, T={cfg.train.stages}, h={cfg.train.hidden}, f={gen_a.channels}, "
        f"{len(curve)} epochs",
        f"  loss {initial:.6g} -> {final:.6g} (ratio {_fmt(metrics['training']['loss_ratio'])})",
        f"held-out distribution A ({exp.test_count} samples, radius {exp.match_radius}): "
        f"PCK {_fmt(det_a.pck)}  precision {_fmt(det_a.precision)}  recall {_fmt(det_a.recall)}",
        f"shifted distribution B ({exp.test_count} samples): "
        f"PCK {_fmt(det_b.pck)}  precision {_fmt(det_b.precision)}  recall {_fmt(det_b.recall)}",
        f"tracking ({exp.sequence_frames} frames, re-prompt every {cfg.track.reprompt_every}): "
        f"mean endpoint error {_fmt(tr['mean_endpoint_error'])} cells, survival {_fmt(tr['survival'])}",
    ]
    if "no_reprompt" in tracking:
        nr = tracking["no_reprompt"]
        lines.append(
            f"tracking without re-prompting: mean endpoint error {_fmt(nr['mean_endpoint_error'])} cells, "
            f"survival {_fmt(nr['survival'])}"
        )
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    return out
