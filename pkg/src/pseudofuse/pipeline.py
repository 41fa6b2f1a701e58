"""End-to-end pseudo-label generation for one sequence.

Stages: fuse each frame's proposals, track both streams in world
coordinates, label motion, refine and propagate static 16-frame tracks, and
assemble every frame with a final NMS, score threshold and point filter.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fusion import Bandwidths, FusionConfig, canonical_order, deaugment_box, fuse, nms
from .geometry import Box7, EgoPose, points_in_box, transform_box
from .io import (
    Detection,
    PseudoLabel,
    PseudoLabelSet,
    FormatError,
    load_detections,
    load_points,
    load_poses,
)
from .staticrefine import (
    MotionConfig,
    StaticRefineConfig,
    correct_16f_motion,
    label_tracks,
    propagate_static,
    refine_static_boxes,
)
from .tracking import STATIC, Track, TrackerConfig, track_sequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    tracker_1f: TrackerConfig = field(default_factory=TrackerConfig)
    tracker_16f: TrackerConfig = field(default_factory=TrackerConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    static: StaticRefineConfig = field(default_factory=StaticRefineConfig)
    final_score_threshold: float = 0.6
    final_nms_iou: float = 0.1
    min_points_in_box: int = 1
    use_16f: bool = True
    fusion_method: str = "kbf"

    def __post_init__(self):
        if not 0 <= self.final_score_threshold <= 1:
            raise ValueError("final_score_threshold must be in [0, 1]")
        if not 0 <= self.final_nms_iou <= 1:
            raise ValueError("final_nms_iou must be in [0, 1]")
        if self.min_points_in_box < 0:
            raise ValueError("min_points_in_box must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        """Build a config from nested sections; omitted keys keep their defaults.

        The shared ``bandwidths`` section feeds both fusion and static
        refinement unless either section overrides it.
        """
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known - {"bandwidths"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        bw = Bandwidths(**data.pop("bandwidths", {}))
        kwargs = {}
        for name, typ in (
            ("fusion", FusionConfig),
            ("tracker_1f", TrackerConfig),
            ("tracker_16f", TrackerConfig),
            ("motion", MotionConfig),
            ("static", StaticRefineConfig),
        ):
            section = dict(data.pop(name, {}))
            if "bandwidths" in section:
                section["bandwidths"] = Bandwidths(**section["bandwidths"])
            elif name in ("fusion", "static"):
                section["bandwidths"] = bw
            kwargs[name] = typ(**section)
        kwargs.update(data)
        return cls(**kwargs)


def load_config(path) -> PipelineConfig:
    """Read a TOML config file mirroring :class:`PipelineConfig`."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return PipelineConfig.from_dict(tomllib.load(fh))


@dataclass(frozen=True)
class FrameInput:
    frame_idx: int
    pose: EgoPose
    detections: tuple[Detection, ...] = ()
    points: np.ndarray | None = None


@dataclass(frozen=True)
class SequenceInput:
    frames: tuple[FrameInput, ...]
    sequence_id: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        idx = [f.frame_idx for f in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")
        for f in frames:
            if f.pose is None:
                raise ValueError(f"frame {f.frame_idx} has no pose")
        object.__setattr__(self, "frames", frames)

    @property
    def frame_indices(self) -> list[int]:
        return [f.frame_idx for f in self.frames]

    @property
    def has_points(self) -> bool:
        return any(f.points is not None for f in self.frames)


def build_sequence(
    detections: Sequence[Detection],
    poses: dict[int, EgoPose],
    points: dict[int, np.ndarray] | None = None,
    sequence_id: str = "",
) -> SequenceInput:
    by_frame: dict[int, list[Detection]] = {f: [] for f in poses}
    for d in detections:
        f = d.box.frame_idx
        if f not in by_frame:
            raise FormatError(f"detections reference frame {f} but no pose is given for it")
        by_frame[f].append(d)
    frames = tuple(
        FrameInput(f, poses[f], tuple(by_frame[f]), None if points is None else points.get(f, np.zeros((0, 3))))
        for f in sorted(poses)
    )
    return SequenceInput(frames, sequence_id)


def load_sequence(detection_paths, pose_path, points_path=None, sequence_id: str = "") -> SequenceInput:
    poses = load_poses(pose_path)
    dets = load_detections(detection_paths)
    points = load_points(points_path) if points_path else None
    return build_sequence(dets, poses, points, sequence_id)


# --- stages ---------------------------------------------------------------


def _fuse_frame(args) -> tuple[list[Box7], list[Box7]]:
    frame, cfg = args
    pools = {"1f": [], "16f": []}
    for d in frame.detections:
        pools[d.stream].append(deaugment_box(d.box, d.tta))
    fused_1f = fuse(pools["1f"], cfg.fusion, cfg.fusion_method)
    fused_16f = fuse(pools["16f"], cfg.fusion, cfg.fusion_method) if cfg.use_16f else []
    return fused_1f, fused_16f


def fuse_sequence(seq: SequenceInput, cfg: PipelineConfig, workers: int = 1):
    """Per-frame fusion of both streams, in each frame's ego coordinates.

    Returns two dicts ``frame_idx -> fused boxes`` for the 1-frame and
    16-frame streams.
    """
    jobs = [(f, cfg) for f in seq.frames]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_fuse_frame, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_fuse_frame(j) for j in jobs]
    idx = seq.frame_indices
    return (
        {f: r[0] for f, r in zip(idx, results)},
        {f: r[1] for f, r in zip(idx, results)},
    )


def to_world(seq: SequenceInput, per_frame: dict[int, list[Box7]]) -> dict[int, list[Box7]]:
    return {f.frame_idx: [transform_box(b, f.pose) for b in per_frame.get(f.frame_idx, [])] for f in seq.frames}


def track_streams(seq: SequenceInput, fused_1f, fused_16f, cfg: PipelineConfig):
    """Track both fused streams in world coordinates and label their motion."""
    tracks_1f = label_tracks(track_sequence(to_world(seq, fused_1f), cfg.tracker_1f), cfg.motion)
    tracks_16f = []
    if cfg.use_16f:
        tracks_16f = label_tracks(track_sequence(to_world(seq, fused_16f), cfg.tracker_16f), cfg.motion)
        tracks_16f = correct_16f_motion(tracks_1f, tracks_16f, cfg.motion)
    return tracks_1f, tracks_16f


def static_boxes(seq: SequenceInput, tracks_16f: Sequence[Track], cfg: PipelineConfig) -> dict[int, list[Box7]]:
    """World-frame static boxes per frame, tagged by provenance in ``detector_id``."""
    out: dict[int, list[Box7]] = {f: [] for f in seq.frame_indices}
    idx = seq.frame_indices
    for t in tracks_16f:
        if t.motion_state != STATIC:
            continue
        refined = refine_static_boxes(t, cfg.static)
        own = {f for f, _ in refined}
        for f, b in propagate_static(t, refined, idx, cfg.static):
            tag = "static-refined" if f in own else "static-propagated"
            out[f].append(b.replace(detector_id=tag))
    return out


def tracked_boxes(seq: SequenceInput, tracks_1f: Sequence[Track]) -> dict[int, list[Box7]]:
    out: dict[int, list[Box7]] = {f: [] for f in seq.frame_indices}
    for t in tracks_1f:
        for e in t.entries:
            out[e.frame_idx].append(e.box.replace(detector_id="tracked-1f"))
    return out


def _source_rank(i: int, fused_1f, tracked_1f) -> int:
    if i < len(fused_1f):
        return 0
    return 1 if i < len(fused_1f) + len(tracked_1f) else 2


def assemble_frame(
    fused_1f: Sequence[Box7],
    tracked_1f: Sequence[Box7],
    static: Sequence[Box7],
    points,
    cfg: PipelineConfig,
) -> list[Box7]:
    """Merge the three label sources of one frame.

    NMS runs over the union by descending score, so a confident 1-frame box
    replaces an overlapping static box. Equal scores are resolved by source,
    in the order fused, tracked, static. Boxes under the score threshold and,
    when points are given, boxes holding fewer than ``min_points_in_box``
    points are dropped.
    """
    pool = list(fused_1f) + list(tracked_1f) + list(static)
    canon = {i: r for r, i in enumerate(canonical_order(pool))}
    order = sorted(range(len(pool)), key=lambda i: (-pool[i].score, _source_rank(i, fused_1f, tracked_1f), canon[i]))
    kept = nms(pool, cfg.final_nms_iou, order)
    kept = [b for b in kept if b.score >= cfg.final_score_threshold]
    if points is not None:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        kept = [b for b in kept if points_in_box(b, pts) >= cfg.min_points_in_box]
    return kept


def run_pipeline(seq: SequenceInput, cfg: PipelineConfig | None = None, workers: int = 1) -> PseudoLabelSet:
    cfg = cfg or PipelineConfig()
    if not seq.has_points:
        log.info("no point clouds given; skipping the point-count filter")
    fused_1f, fused_16f = fuse_sequence(seq, cfg, workers)
    tracks_1f, tracks_16f = track_streams(seq, fused_1f, fused_16f, cfg)
    return assemble_sequence(seq, cfg, fused_1f, tracks_1f, tracks_16f)


def assemble_sequence(seq: SequenceInput, cfg: PipelineConfig, fused_1f, tracks_1f, tracks_16f) -> PseudoLabelSet:
    world_static = static_boxes(seq, tracks_16f, cfg) if cfg.use_16f else {}
    world_tracked = tracked_boxes(seq, tracks_1f)
    labels = []
    for frame in seq.frames:
        f = frame.frame_idx
        inv = frame.pose.inverse()
        fused = [b.replace(detector_id="fused-1f") for b in fused_1f.get(f, [])]
        tracked = [transform_box(b, inv) for b in world_tracked.get(f, [])]
        static = [transform_box(b, inv) for b in world_static.get(f, [])]
        kept = assemble_frame(fused, tracked, static, frame.points, cfg)
        kept = [kept[i].replace(frame_idx=f) for i in canonical_order(kept)]
        labels.extend(PseudoLabel(b, b.detector_id) for b in kept)
    return PseudoLabelSet(tuple(labels), cfg.digest())
