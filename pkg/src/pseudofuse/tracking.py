"""Tracking-by-detection with a constant-velocity Kalman filter.

The filter state is ``(x, y, z, heading, l, w, h, vx, vy)`` with velocities in
metres per frame. Boxes are expected in world coordinates.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Box7, normalize_angle, pairwise_iou

STATIC, DYNAMIC, UNKNOWN = "static", "dynamic", "unknown"

_DIM_X = 9
_DIM_Z = 7
_F = np.eye(_DIM_X)
_F[0, 7] = _F[1, 8] = 1.0
_H = np.eye(_DIM_Z, _DIM_X)
_GATED = 1e6


class TrackingError(RuntimeError):
    """Raised when the filter covariance stops being positive semi-definite."""


@dataclass(frozen=True)
class TrackerConfig:
    metric: str = "iou"  # "iou" (BEV) or "distance"
    iou_threshold: float = 0.1
    distance_threshold: float = 2.0
    distance_fallback: bool = True
    max_age: int = 3
    min_hits: int = 2
    meas_pos_sigma: float = 0.5
    meas_heading_sigma: float = 0.1
    meas_dim_sigma: float = 0.2
    process_sigma: float = 0.5
    init_vel_sigma: float = 10.0

    def __post_init__(self):
        if self.metric not in ("iou", "distance"):
            raise ValueError(f"unknown association metric {self.metric!r}")
        if not (self.iou_threshold > 0 and self.distance_threshold > 0):
            raise ValueError("association thresholds must be positive")
        if self.max_age < 1 or self.min_hits < 1:
            raise ValueError("max_age and min_hits must be >= 1")

    def measurement_noise(self) -> np.ndarray:
        p, a, d = self.meas_pos_sigma**2, self.meas_heading_sigma**2, self.meas_dim_sigma**2
        return np.diag([p, p, p, a, d, d, d])

    def process_noise(self) -> np.ndarray:
        # white-noise acceleration on the planar axes, small drift elsewhere
        s2 = self.process_sigma**2
        Q = np.diag([0.25 * s2, 0.25 * s2, 0.01 * s2, 1e-3, 1e-4, 1e-4, 1e-4, s2, s2])
        Q[0, 7] = Q[7, 0] = Q[1, 8] = Q[8, 1] = 0.5 * s2
        return Q


@dataclass(frozen=True)
class TrackState:
    mean: np.ndarray
    covariance: np.ndarray
    hits: int = 1
    misses: int = 0
    track_id: int = 0
    # carried for reconstructing boxes from the state
    template: Box7 | None = field(default=None, compare=False)

    @property
    def position(self) -> np.ndarray:
        return self.mean[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[7:9]

    def to_box(self, frame_idx: int | None = None) -> Box7:
        m = self.mean
        tpl = self.template
        return Box7(
            float(m[0]), float(m[1]), float(m[2]),
            max(float(m[4]), 1e-3), max(float(m[5]), 1e-3), max(float(m[6]), 1e-3),
            float(m[3]),
            score=tpl.score if tpl else 1.0,
            class_id=tpl.class_id if tpl else 0,
            detector_id=tpl.detector_id if tpl else "",
            frame_idx=frame_idx if frame_idx is not None else (tpl.frame_idx if tpl else 0),
        )


def _measurement(box: Box7) -> np.ndarray:
    return np.array([box.cx, box.cy, box.cz, box.heading, box.l, box.w, box.h])


def init_state(box: Box7, cfg: TrackerConfig, track_id: int = 0) -> TrackState:
    mean = np.zeros(_DIM_X)
    mean[:_DIM_Z] = _measurement(box)
    cov = np.zeros((_DIM_X, _DIM_X))
    cov[:_DIM_Z, :_DIM_Z] = cfg.measurement_noise()
    cov[7, 7] = cov[8, 8] = cfg.init_vel_sigma**2
    return TrackState(mean, cov, hits=1, misses=0, track_id=track_id, template=box)


def predict(state: TrackState, cfg: TrackerConfig | None = None) -> TrackState:
    cfg = cfg or TrackerConfig()
    mean = _F @ state.mean
    cov = _F @ state.covariance @ _F.T + cfg.process_noise()
    return dataclasses.replace(state, mean=mean, covariance=0.5 * (cov + cov.T))


def update(state: TrackState, detection: Box7, cfg: TrackerConfig | None = None) -> TrackState:
    """Kalman measurement update with the heading innovation wrapped to (-pi, pi]."""
    cfg = cfg or TrackerConfig()
    R = cfg.measurement_noise()
    P = state.covariance
    innovation = _measurement(detection) - _H @ state.mean
    innovation[3] = normalize_angle(innovation[3])
    S = _H @ P @ _H.T + R
    K = np.linalg.solve(S, _H @ P).T
    mean = state.mean + K @ innovation
    mean[3] = normalize_angle(mean[3])
    IKH = np.eye(_DIM_X) - K @ _H
    cov = IKH @ P @ IKH.T + K @ R @ K.T  # Joseph form
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)) or np.linalg.eigvalsh(cov).min() < -1e-9:
        raise TrackingError(f"covariance lost positive semi-definiteness for track {state.track_id}")
    return dataclasses.replace(
        state, mean=mean, covariance=cov, hits=state.hits + 1, misses=0, template=detection
    )


@dataclass(frozen=True)
class Matching:
    pairs: list[tuple[int, int]]
    unmatched_tracks: list[int]
    unmatched_detections: list[int]


def _cost_matrix(track_boxes, detections, cfg: TrackerConfig, metric: str):
    if metric == "iou":
        iou = pairwise_iou(track_boxes, detections, "bev")
        return 1.0 - iou, iou >= cfg.iou_threshold
    a = np.array([(b.cx, b.cy) for b in track_boxes]).reshape(-1, 2)
    b = np.array([(d.cx, d.cy) for d in detections]).reshape(-1, 2)
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return dist, dist <= cfg.distance_threshold


def associate(
    tracks: Sequence[TrackState | Box7],
    detections: Sequence[Box7],
    cfg: TrackerConfig,
    metric: str | None = None,
) -> Matching:
    """Optimal one-to-one assignment of detections to (predicted) tracks.

    Pairs outside the gate carry a prohibitive cost, so the Hungarian solution
    maximizes the number of gated matches first and minimizes total cost
    among those.
    """
    metric = metric or cfg.metric
    if len({d.frame_idx for d in detections}) > 1:
        raise ValueError("detections passed to associate must share one frame")
    track_boxes = [t.to_box() if isinstance(t, TrackState) else t for t in tracks]
    if not track_boxes or not detections:
        return Matching([], list(range(len(track_boxes))), list(range(len(detections))))
    cost, valid = _cost_matrix(track_boxes, detections, cfg, metric)
    rows, cols = linear_sum_assignment(np.where(valid, cost, _GATED))
    pairs = sorted((int(r), int(c)) for r, c in zip(rows, cols) if valid[r, c])
    mt = {r for r, _ in pairs}
    md = {c for _, c in pairs}
    return Matching(
        pairs,
        [i for i in range(len(track_boxes)) if i not in mt],
        [j for j in range(len(detections)) if j not in md],
    )


@dataclass(frozen=True)
class TrackEntry:
    frame_idx: int
    box: Box7
    interpolated: bool = False


@dataclass(frozen=True)
class Track:
    track_id: int
    entries: tuple[TrackEntry, ...]
    motion_state: str = UNKNOWN

    def __post_init__(self):
        frames = [e.frame_idx for e in self.entries]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("track entries must be strictly increasing in frame_idx")
        if self.motion_state not in (STATIC, DYNAMIC, UNKNOWN):
            raise ValueError(f"unknown motion state {self.motion_state!r}")

    @property
    def frames(self) -> list[int]:
        return [e.frame_idx for e in self.entries]

    @property
    def boxes(self) -> list[Box7]:
        return [e.box for e in self.entries]

    @property
    def num_detections(self) -> int:
        return sum(not e.interpolated for e in self.entries)

    def with_motion(self, motion_state: str) -> "Track":
        return dataclasses.replace(self, motion_state=motion_state)

    def __len__(self):
        return len(self.entries)


class _Live:
    __slots__ = ("state", "entries", "pending")

    def __init__(self, state: TrackState, entry: TrackEntry):
        self.state = state
        self.entries = [entry]
        self.pending: list[TrackEntry] = []


def _frames(stream) -> Iterable[tuple[int, Sequence[Box7]]]:
    if isinstance(stream, Mapping):
        return list(stream.items())
    items = list(stream)
    if items and isinstance(items[0], tuple) and len(items[0]) == 2 and isinstance(items[0][0], (int, np.integer)):
        return items
    return list(enumerate(items))


def track_sequence(stream, cfg: TrackerConfig | None = None) -> list[Track]:
    """Track boxes through a sequence.

    ``stream`` is a mapping ``frame_idx -> boxes``, a sequence of
    ``(frame_idx, boxes)`` pairs, or a plain list of per-frame box lists
    indexed from 0. Frames must be strictly increasing. Tracks are emitted
    once they have at least ``min_hits`` detections; frames a track missed
    before being re-associated are filled with predicted boxes flagged
    ``interpolated``.
    """
    cfg = cfg or TrackerConfig()
    live: list[_Live] = []
    done: list[_Live] = []
    next_id = itertools.count()
    last_frame = None
    for frame_idx, boxes in _frames(stream):
        frame_idx = int(frame_idx)
        if last_frame is not None and frame_idx <= last_frame:
            raise ValueError(f"frames out of order: {frame_idx} after {last_frame}")
        boxes = list(boxes)
        if any(b.frame_idx != frame_idx for b in boxes):
            raise ValueError(f"box frame_idx does not match frame {frame_idx}")
        steps = 1 if last_frame is None else frame_idx - last_frame
        last_frame = frame_idx
        for t in live:
            for _ in range(steps):
                t.state = predict(t.state, cfg)

        states = [t.state for t in live]
        m = associate(states, boxes, cfg)
        pairs = list(m.pairs)
        if cfg.metric == "iou" and cfg.distance_fallback and m.unmatched_tracks and m.unmatched_detections:
            sub = associate(
                [states[i] for i in m.unmatched_tracks],
                [boxes[j] for j in m.unmatched_detections],
                cfg,
                metric="distance",
            )
            pairs += [(m.unmatched_tracks[i], m.unmatched_detections[j]) for i, j in sub.pairs]

        matched_t = {i for i, _ in pairs}
        matched_d = {j for _, j in pairs}
        for i, j in pairs:
            t = live[i]
            t.state = update(t.state, boxes[j], cfg)
            t.entries.extend(t.pending)
            t.pending = []
            t.entries.append(TrackEntry(frame_idx, boxes[j]))
        survivors = []
        for i, t in enumerate(live):
            if i not in matched_t:
                t.state = dataclasses.replace(t.state, misses=t.state.misses + 1)
                if t.state.misses > cfg.max_age:
                    done.append(t)
                    continue
                t.pending.append(TrackEntry(frame_idx, t.state.to_box(frame_idx), interpolated=True))
            survivors.append(t)
        live = survivors
        for j, box in enumerate(boxes):
            if j not in matched_d:
                live.append(_Live(init_state(box, cfg, next(next_id)), TrackEntry(frame_idx, box)))

    out = [
        Track(t.state.track_id, tuple(t.entries))
        for t in done + live
        if t.state.hits >= cfg.min_hits
    ]
    return sorted(out, key=lambda tr: tr.track_id)
