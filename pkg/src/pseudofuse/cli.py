"""``pseudofuse`` command line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

from . import evalbench, io, pipeline
from .tracking import STATIC

log = logging.getLogger("pseudofuse")


def _read_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _config(args) -> pipeline.PipelineConfig:
    return pipeline.load_config(args.config) if args.config else pipeline.PipelineConfig()


def _sequence(args) -> pipeline.SequenceInput:
    return pipeline.load_sequence(args.detections, args.poses, getattr(args, "points", None))


def _labels_from(seq, per_frame, provenance):
    return [
        io.PseudoLabel(b.replace(detector_id=provenance), provenance)
        for frame in seq.frames
        for b in per_frame.get(frame.frame_idx, [])
    ]


def cmd_run(args):
    cfg = _config(args)
    labels = pipeline.run_pipeline(_sequence(args), cfg, workers=args.workers)
    io.save_pseudo_labels(labels, args.out)
    log.info("wrote %d pseudo-labels to %s", len(labels), args.out)


def cmd_fuse(args):
    cfg = _config(args)
    seq = _sequence(args)
    f1, f16 = pipeline.fuse_sequence(seq, cfg, args.workers)
    labels = _labels_from(seq, f1, "fused-1f") + _labels_from(seq, f16, "fused-16f")
    labels.sort(key=lambda lab: lab.box.frame_idx)
    io.save_pseudo_labels(io.PseudoLabelSet(tuple(labels), cfg.digest()), args.out)


def cmd_track(args):
    cfg = _config(args)
    seq = _sequence(args)
    f1, f16 = pipeline.fuse_sequence(seq, cfg, args.workers)
    t1, t16 = pipeline.track_streams(seq, f1, f16, cfg)
    with open(args.out, "w") as fh:
        fh.write(json.dumps({"version": io.FORMAT_VERSION, "config_hash": cfg.digest()}) + "\n")
        for stream, tracks in (("1f", t1), ("16f", t16)):
            for t in tracks:
                for e in t.entries:
                    b = e.box
                    fh.write(json.dumps({
                        "track_id": t.track_id, "stream": stream, "motion": t.motion_state,
                        "frame": e.frame_idx, "interpolated": e.interpolated,
                        "box": [b.cx, b.cy, b.cz, b.l, b.w, b.h, b.heading],
                        "score": b.score, "class": b.class_id,
                    }) + "\n")


def cmd_refine(args):
    cfg = _config(args)
    seq = _sequence(args)
    f1, f16 = pipeline.fuse_sequence(seq, cfg, args.workers)
    _, t16 = pipeline.track_streams(seq, f1, f16, cfg)
    world = pipeline.static_boxes(seq, t16, cfg)
    labels = []
    for frame in seq.frames:
        inv = frame.pose.inverse()
        for b in world[frame.frame_idx]:
            tag = b.detector_id
            labels.append(io.PseudoLabel(pipeline.transform_box(b, inv).replace(frame_idx=frame.frame_idx), tag))
    io.save_pseudo_labels(io.PseudoLabelSet(tuple(labels), cfg.digest()), args.out)
    log.info("%d static tracks refined", sum(t.motion_state == STATIC for t in t16))


def _eval_config(path) -> evalbench.EvalConfig:
    if not path:
        return evalbench.EvalConfig()
    data = _read_toml(path)
    data = data.get("eval", data)
    kwargs = {}
    if "iou_thresholds" in data:
        kwargs["iou_thresholds"] = tuple(data["iou_thresholds"])
    if "modes" in data:
        kwargs["modes"] = tuple(m.lower() for m in data["modes"])
    if "recall_positions" in data:
        kwargs["recall_positions"] = int(data["recall_positions"])
    if "range_bins" in data:
        kwargs["range_bins"] = tuple((float(lo), math.inf if hi in ("inf", None) else float(hi)) for lo, hi in data["range_bins"])
    return evalbench.EvalConfig(**kwargs)


def cmd_eval(args):
    cfg = _eval_config(args.config)
    preds = io.load_boxes(args.pred)
    gt = io.load_boxes(args.gt)
    # frames listed only in predictions have no ground truth objects
    gt_frames = set(gt) | set(preds)
    gt = {f: gt.get(f, []) for f in sorted(gt_frames)}
    table = evalbench.evaluate_ap(preds, gt, cfg)
    thr = max(cfg.iou_thresholds)
    text, records = evalbench.benchmark_report({os.path.basename(args.pred): table}, thr)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(evalbench.records_to_jsonl(records))


def _synth_config(path) -> evalbench.SynthConfig:
    if not path:
        return evalbench.SynthConfig()
    data = dict(_read_toml(path).get("synth", {}))
    if "detectors" in data:
        dets = []
        for d in data["detectors"]:
            d = dict(d)
            for key in ("dropout_1f", "dropout_16f"):
                if key in d:
                    d[key] = tuple(tuple(p) for p in d[key])
            if "dim_bias" in d:
                d["dim_bias"] = tuple(d["dim_bias"])
            dets.append(evalbench.DetectorNoise(**d))
        data["detectors"] = tuple(dets)
    return evalbench.SynthConfig(**data)


def cmd_synth(args):
    cfg = _synth_config(args.config)
    scene = evalbench.generate_scene(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    seq = scene.sequence
    io.save_detections([d for f in seq.frames for d in f.detections], os.path.join(args.out_dir, "detections.jsonl"))
    io.save_poses({f.frame_idx: f.pose for f in seq.frames}, os.path.join(args.out_dir, "poses.jsonl"))
    if cfg.with_points:
        io.save_points({f.frame_idx: f.points for f in seq.frames}, os.path.join(args.out_dir, "points.bin"))
    gt = [io.PseudoLabel(b.replace(detector_id="gt"), "gt") for f in sorted(scene.ground_truth) for b in scene.ground_truth[f]]
    io.save_pseudo_labels(io.PseudoLabelSet(tuple(gt), "ground-truth"), os.path.join(args.out_dir, "gt.jsonl"))
    log.info("wrote synthetic scene (%d frames) to %s", cfg.n_frames, args.out_dir)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pseudofuse", description="Multi-detector 3D pseudo-label generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--detections", required=True, nargs="+", help="detection JSON-lines files or globs")
        sp.add_argument("--poses", required=True)
        sp.add_argument("--points")
        sp.add_argument("--config")
        sp.add_argument("--out", required=True)
        sp.add_argument("--workers", type=int, default=1)
        sp.set_defaults(func=fn)

    stage("run", cmd_run, "full pipeline: fused, tracked and static pseudo-labels")
    stage("fuse", cmd_fuse, "per-frame fusion of both streams (ego coordinates)")
    stage("track", cmd_track, "fusion plus tracking; writes track entries in world coordinates")
    stage("refine", cmd_refine, "static-object refinement and propagation (ego coordinates)")

    ev = sub.add_parser("eval", help="AP of a label file against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--config")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    sy = sub.add_parser("synth", help="write a synthetic benchmark scene")
    sy.add_argument("--config")
    sy.add_argument("--out-dir", required=True)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (io.FormatError, ValueError, FileNotFoundError) as exc:
        print(f"pseudofuse: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
