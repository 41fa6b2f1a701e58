"""Motion-state classification and temporal refinement of static tracks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .fusion import Bandwidths, kbf_fuse_cluster
from .geometry import Box7, bev_iou
from .tracking import DYNAMIC, STATIC, UNKNOWN, Track


@dataclass(frozen=True)
class MotionConfig:
    begin_to_end_threshold: float = 2.0
    centre_variance_threshold: float = 0.25
    overlap_iou_threshold: float = 0.1

    def __post_init__(self):
        if not (self.begin_to_end_threshold > 0 and self.centre_variance_threshold > 0 and self.overlap_iou_threshold > 0):
            raise ValueError("motion thresholds must be positive")


@dataclass(frozen=True)
class StaticRefineConfig:
    window: int = 16
    score_floor: float = 0.7
    decay: float = 0.95
    min_track_detections: int = 7
    bandwidths: Bandwidths = field(default_factory=Bandwidths)

    def __post_init__(self):
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if not 0 <= self.score_floor <= 1:
            raise ValueError("score_floor must be in [0, 1]")


def classify_motion(track: Track, cfg: MotionConfig | None = None) -> str:
    """Label a track static or dynamic from its world-frame centroids.

    Static requires both a short begin-to-end displacement and a small
    per-axis centroid variance. Single-entry tracks are ``unknown``.
    """
    cfg = cfg or MotionConfig()
    if not track.entries:
        raise ValueError("cannot classify an empty track")
    if len(track.entries) < 2:
        return UNKNOWN
    c = np.array([(b.cx, b.cy, b.cz) for b in track.boxes])
    travel = float(np.linalg.norm(c[-1] - c[0]))
    var = c.var(axis=0)
    if travel < cfg.begin_to_end_threshold and np.all(var < cfg.centre_variance_threshold):
        return STATIC
    return DYNAMIC


def label_tracks(tracks: Sequence[Track], cfg: MotionConfig | None = None) -> list[Track]:
    return [t.with_motion(classify_motion(t, cfg)) for t in tracks]


def correct_16f_motion(
    tracks_1f: Sequence[Track], tracks_16f: Sequence[Track], cfg: MotionConfig | None = None
) -> list[Track]:
    """Relabel static 16-frame tracks that a dynamic 1-frame trajectory drives through.

    Every box of every dynamic 1-frame track is tested against every box of
    each static 16-frame track; any BEV IoU at or above
    ``overlap_iou_threshold`` marks the 16-frame track dynamic. Dynamic labels
    are never reverted.
    """
    cfg = cfg or MotionConfig()
    dyn = [b for t in tracks_1f if t.motion_state == DYNAMIC for b in t.boxes]
    if not dyn:
        return list(tracks_16f)
    dyn_xy = np.array([(b.cx, b.cy) for b in dyn])
    dyn_r = np.array([0.5 * np.hypot(b.l, b.w) for b in dyn])
    tree = cKDTree(dyn_xy)
    reach = float(dyn_r.max())
    out = []
    for t in tracks_16f:
        if t.motion_state == STATIC and _crossed(t.boxes, dyn, tree, reach, cfg.overlap_iou_threshold):
            t = t.with_motion(DYNAMIC)
        out.append(t)
    return out


def _crossed(boxes, dyn, tree, reach, threshold) -> bool:
    for b in boxes:
        r = 0.5 * np.hypot(b.l, b.w) + reach
        for j in tree.query_ball_point((b.cx, b.cy), r):
            if bev_iou(b, dyn[j]) >= threshold:
                return True
    return False


def refine_static_boxes(track: Track, cfg: StaticRefineConfig | None = None) -> list[tuple[int, Box7]]:
    """Rolling-window KBF over the track's boxes in frames ``[k - H, k]``.

    Every entry inside the window is fused (no minimum cluster size) and the
    result is scored ``max(score_floor, fused score)``.
    """
    cfg = cfg or StaticRefineConfig()
    out = []
    frames = track.frames
    boxes = track.boxes
    lo = 0
    for k, frame in enumerate(frames):
        while frames[lo] < frame - cfg.window:
            lo += 1
        fused = kbf_fuse_cluster(boxes[lo : k + 1], cfg.bandwidths)
        out.append((frame, fused.replace(score=max(cfg.score_floor, fused.score), frame_idx=frame)))
    return out


def propagate_static(
    track: Track,
    refined: Sequence[tuple[int, Box7]],
    sequence_length: int | Sequence[int],
    cfg: StaticRefineConfig | None = None,
) -> list[tuple[int, Box7]]:
    """Extend the first and last refined boxes over the rest of the sequence.

    ``sequence_length`` is either a frame count (frames ``0..n-1``) or the
    sequence's frame indices. A box copied ``m`` frames away from the track
    boundary keeps its geometry and gets score ``s * decay**m``. Tracks with
    ``min_track_detections`` or fewer real detections are returned unchanged.
    """
    cfg = cfg or StaticRefineConfig()
    refined = sorted(refined, key=lambda fb: fb[0])
    if not refined or track.num_detections <= cfg.min_track_detections:
        return list(refined)
    seq = list(range(sequence_length)) if isinstance(sequence_length, (int, np.integer)) else list(sequence_length)
    pos = {f: i for i, f in enumerate(seq)}
    first_f, first_box = refined[0]
    last_f, last_box = refined[-1]
    if first_f not in pos or last_f not in pos:
        raise ValueError("refined frames are not part of the sequence")
    i0, i1 = pos[first_f], pos[last_f]
    before = [
        (seq[i], first_box.replace(score=first_box.score * cfg.decay ** (i0 - i), frame_idx=seq[i]))
        for i in range(i0)
    ]
    after = [
        (seq[i], last_box.replace(score=last_box.score * cfg.decay ** (i - i1), frame_idx=seq[i]))
        for i in range(i1 + 1, len(seq))
    ]
    return before + list(refined) + after
