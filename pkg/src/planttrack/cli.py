"""``planttrack`` command line.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from planttrack.config import RunConfig, load_config
from planttrack.errors import NumericalError, PlantTrackError, ValidationError
from planttrack.experiment import ExperimentError, run_experiment
from planttrack.features import DEFAULT_FAR, DEFAULT_NEAR, FeatureMap, apply_depth_mask, load_array, mask_for_features
from planttrack.metrics import DetectionMetrics
from planttrack.peaks import PeakConfig, detect, read_keypoints, write_keypoints
from planttrack.synthetic import generate_dataset, load_dataset, load_sample_dir, read_manifest
from planttrack.tracker import TrackConfig, track, write_tracks
from planttrack.train import Model, train, write_loss_curve

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("planttrack")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_gen_data(args) -> None:
    cfg = _config(args.config)
    generate_dataset(cfg.gen, args.count, args.out, args.seed)
    log.info("wrote %d samples to %s", args.count, args.out)


def cmd_train(args) -> None:
    cfg = _config(args.config)
    samples = load_dataset(args.data)
    tcfg = dataclasses.replace(cfg.train, seed=args.seed)
    model, curve = train(samples, tcfg)
    model.save(args.out)
    write_loss_curve(Path(args.out) / "loss_curve.csv", curve)
    log.info("loss %.6g -> %.6g; model saved to %s", curve[0].total, curve[-1].total, args.out)


def cmd_detect(args) -> None:
    model = Model.load(args.model)
    feats = FeatureMap.load(args.features)
    if args.depth:
        mask = mask_for_features(load_array(args.depth), (feats.height, feats.width), args.near, args.far)
        feats = apply_depth_mask(feats, mask)
    kps = detect(model, feats, PeakConfig(threshold=args.threshold, radius=args.radius))
    write_keypoints(args.out, kps)


def _load_frames(directory: Path, near: float, far: float) -> list[FeatureMap]:
    subdirs = sorted(p for p in directory.iterdir() if p.is_dir() and (p / "features.pttn").exists())
    if subdirs:
        return [load_sample_dir(p, near, far)[0] for p in subdirs]
    files = sorted(directory.glob("*.pttn"))
    if not files:
        raise ValidationError(f"{directory}: no frames found")
    return [FeatureMap.load(p) for p in files]


def cmd_track(args) -> None:
    cfg = _config(args.config)
    model = Model.load(args.model)
    frames = _load_frames(Path(args.frames), cfg.gen.near, cfg.gen.far)
    tcfg = cfg.track
    if args.reprompt_every is not None:
        tcfg = dataclasses.replace(tcfg, reprompt_every=args.reprompt_every)
    prompts = detect(model, frames[0], cfg.peak)
    tracks = track(frames, prompts, tcfg, lambda t, frame: detect(model, frame, cfg.peak))
    write_tracks(args.out, tracks)


def cmd_eval(args) -> None:
    doc = read_manifest(args.gt)
    entries = doc["samples"]
    pred = Path(args.pred)
    if pred.is_dir():
        files = [pred / f"{e['dir']}.csv" for e in entries]
    elif len(entries) == 1:
        files = [pred]
    else:
        raise ValidationError(f"{pred} is a single file but the manifest lists {len(entries)} samples")
    metrics = DetectionMetrics(args.match_radius)
    for entry, path in zip(entries, files):
        gt = [(int(k["cell_x"]), int(k["cell_y"]), k["class"]) for k in entry["keypoints"]]
        metrics.add(read_keypoints(path), gt)
    Path(args.out).write_text(json.dumps(metrics.to_dict(), indent=2) + "\n")


def cmd_run_experiment(args) -> None:
    cfg = _config(args.config)
    out = run_experiment(cfg, args.out)
    sys.stdout.write((out / "report.txt").read_text())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="planttrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a heatmap predictor on a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="extract keypoints from one feature tensor")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--depth")
    s.add_argument("--near", type=float, default=DEFAULT_NEAR)
    s.add_argument("--far", type=float, default=DEFAULT_FAR)
    s.add_argument("--threshold", type=float, default=0.6)
    s.add_argument("--radius", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("track", help="detect on the first frame and track through a frame directory")
    s.add_argument("--model", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--reprompt-every", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="score keypoint CSVs against a dataset manifest")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--match-radius", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run-experiment", help="generate, train, evaluate and track end to end")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run_experiment)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ExperimentError):
        exc = exc.cause
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (PlantTrackError, OSError) as exc:
        print(f"planttrack {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
