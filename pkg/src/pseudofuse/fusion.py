"""Clustering and fusion of box proposals from several detectors.

KDE Box Fusion (``kbf``) picks every box parameter at the peak of a
score-weighted Gaussian KDE over the cluster members. ``nms``, ``wbf_corners``
and ``wbf_params`` are the baselines it is compared against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import FUSED_ID, Box7, bev_iou, corners_3d, normalize_angle
from .kde import _peak_index

_PARAM_NAMES = ("cx", "cy", "cz", "l", "w", "h", "score")


@dataclass(frozen=True)
class Bandwidths:
    center: float = 1.0
    dims: float = 0.1
    heading: float = 0.1  # in sin(heading) units
    score: float = 0.1

    def __post_init__(self):
        for name in ("center", "dims", "heading", "score"):
            if not getattr(self, name) > 0:
                raise ValueError(f"bandwidth {name} must be positive")


@dataclass(frozen=True)
class FusionConfig:
    match_radius: float = 2.0
    min_cluster_size: int = 4
    bandwidths: Bandwidths = field(default_factory=Bandwidths)

    def __post_init__(self):
        if not self.match_radius > 0:
            raise ValueError("match_radius must be positive")
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be >= 1")


@dataclass(frozen=True)
class ProposalSet:
    boxes: tuple[Box7, ...]

    def __post_init__(self):
        boxes = tuple(self.boxes)
        if len({b.frame_idx for b in boxes}) > 1:
            raise ValueError("all proposals in a set must share frame_idx")
        object.__setattr__(self, "boxes", boxes)

    @property
    def source_count(self) -> int:
        return len({b.detector_id for b in self.boxes})

    def __len__(self):
        return len(self.boxes)


@dataclass(frozen=True)
class TTA:
    """A test-time augmentation: optional flips, then a world rotation ``rot``."""

    flip_x: bool = False
    flip_y: bool = False
    rot: float = 0.0


TTA_PERMUTATIONS = ("none", "rwf", "rwr", "rwf+rwr")


def _flip(box: Box7, flip_x: bool, flip_y: bool) -> Box7:
    cx, cy, heading = box.cx, box.cy, box.heading
    if flip_x:
        cy, heading = -cy, -heading
    if flip_y:
        cx, heading = -cx, math.pi - heading
    return box.replace(cx=cx, cy=cy, heading=normalize_angle(heading))


def _rotate(box: Box7, rho: float) -> Box7:
    c, s = math.cos(rho), math.sin(rho)
    return box.replace(
        cx=c * box.cx - s * box.cy,
        cy=s * box.cx + c * box.cy,
        heading=normalize_angle(box.heading + rho),
    )


def augment_box(box: Box7, tta: TTA) -> Box7:
    """Forward augmentation: flip, then rotate the world by ``tta.rot``."""
    return _rotate(_flip(box, tta.flip_x, tta.flip_y), tta.rot)


def deaugment_box(box: Box7, tta: TTA) -> Box7:
    """Undo ``augment_box``: rotate back by ``-tta.rot``, then un-flip."""
    return _flip(_rotate(box, -tta.rot), tta.flip_x, tta.flip_y)


def canonical_order(boxes: Sequence[Box7]) -> list[int]:
    """Indices sorting boxes by descending score with a total tie-break."""
    return sorted(
        range(len(boxes)),
        key=lambda i: (-boxes[i].score, boxes[i].params, boxes[i].detector_id, i),
    )


def cluster_proposals(props: ProposalSet | Sequence[Box7], cfg: FusionConfig) -> list[list[int]]:
    """Greedy radius clustering seeded by the best remaining box.

    Each seed claims every unassigned box whose centroid lies within
    ``cfg.match_radius`` of its own. Claimed boxes stay claimed even when the
    cluster is then dropped for having fewer than ``cfg.min_cluster_size``
    members.
    """
    boxes = props.boxes if isinstance(props, ProposalSet) else tuple(props)
    if not boxes:
        return []
    centers = np.array([(b.cx, b.cy, b.cz) for b in boxes])
    tree = cKDTree(centers)
    assigned = np.zeros(len(boxes), dtype=bool)
    clusters = []
    for seed in canonical_order(boxes):
        if assigned[seed]:
            continue
        near = tree.query_ball_point(centers[seed], cfg.match_radius)
        members = sorted(i for i in near if not assigned[i])
        assigned[members] = True
        if len(members) >= cfg.min_cluster_size:
            clusters.append(members)
    return clusters


def kbf_fuse_cluster(cluster: Sequence[Box7], cfg: FusionConfig | Bandwidths) -> Box7:
    """Fuse one cluster with KDE Box Fusion.

    Centre axes, sizes and score are each set to the peak of their own weighted
    KDE, weighted by member scores. The heading is selected, not averaged: the
    KDE runs over ``sin(heading)`` and the winning member's original heading is
    returned.
    """
    if not cluster:
        raise ValueError("cannot fuse an empty cluster")
    bw = cfg.bandwidths if isinstance(cfg, FusionConfig) else cfg
    members = [cluster[i] for i in canonical_order(cluster)]
    arr = np.array([b.params + (b.score,) for b in members])
    weights = arr[:, 7]
    if not np.any(weights > 0):
        weights = np.ones_like(weights)
    out = {}
    for col, name in enumerate(_PARAM_NAMES[:6]):
        h = bw.center if col < 3 else bw.dims
        out[name] = float(arr[_peak_index(arr[:, col], weights, h), col])
    out["score"] = float(arr[_peak_index(arr[:, 7], weights, bw.score), 7])
    k = _peak_index(np.sin(arr[:, 6]), weights, bw.heading)
    return Box7(
        heading=members[k].heading,
        class_id=members[0].class_id,
        detector_id=FUSED_ID,
        frame_idx=members[0].frame_idx,
        **out,
    )


def _select_top(cluster: Sequence[Box7]) -> Box7:
    best = cluster[canonical_order(cluster)[0]]
    return best.replace(detector_id=FUSED_ID)


def _circular_mean(headings: np.ndarray, weights: np.ndarray) -> float:
    return normalize_angle(math.atan2(float(weights @ np.sin(headings)), float(weights @ np.cos(headings))))


def wbf_params(cluster: Sequence[Box7]) -> Box7:
    """Score-weighted average of every box parameter (circular mean for heading)."""
    if not cluster:
        raise ValueError("cannot fuse an empty cluster")
    arr = np.array([b.params + (b.score,) for b in cluster])
    w = arr[:, 7]
    if w.sum() <= 0:
        w = np.ones_like(w)
    mean = w @ arr / w.sum()
    return Box7(
        *(float(v) for v in mean[:6]),
        heading=_circular_mean(arr[:, 6], w),
        score=float(min(max(mean[7], 0.0), 1.0)),
        class_id=cluster[0].class_id,
        detector_id=FUSED_ID,
        frame_idx=cluster[0].frame_idx,
    )


def wbf_corners(cluster: Sequence[Box7]) -> Box7:
    """Weighted box fusion through two opposite 3D corners per box.

    Corner ``(-l/2, -w/2, -h/2)`` and its opposite, expressed in the world,
    are averaged with score weights. The fused heading is the weighted
    circular mean; the averaged diagonal is rotated into that heading to
    recover the size. The score is the plain mean of member scores.
    """
    if not cluster:
        raise ValueError("cannot fuse an empty cluster")
    w = np.array([b.score for b in cluster])
    if w.sum() <= 0:
        w = np.ones_like(w)
    lo = np.array([corners_3d(b)[2] for b in cluster])  # (-l/2, -w/2, bottom)
    hi = np.array([corners_3d(b)[4] for b in cluster])  # (+l/2, +w/2, top)
    lo_m = w @ lo / w.sum()
    hi_m = w @ hi / w.sum()
    heading = _circular_mean(np.array([b.heading for b in cluster]), w)
    center = 0.5 * (lo_m + hi_m)
    d = hi_m - lo_m
    c, s = math.cos(heading), math.sin(heading)
    dims = np.abs([c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]])
    dims = np.maximum(dims, 1e-6)
    return Box7(
        *(float(v) for v in center),
        *(float(v) for v in dims),
        heading=heading,
        score=float(np.mean([b.score for b in cluster])),
        class_id=cluster[0].class_id,
        detector_id=FUSED_ID,
        frame_idx=cluster[0].frame_idx,
    )


def nms(boxes: Sequence[Box7], iou_threshold: float, order: Sequence[int] | None = None) -> list[Box7]:
    """Greedy BEV-IoU non-maximum suppression, highest score first.

    ``order`` overrides the visiting order (default: :func:`canonical_order`).
    """
    order = canonical_order(boxes) if order is None else order
    kept: list[Box7] = []
    for i in order:
        b = boxes[i]
        if all(bev_iou(b, k) <= iou_threshold for k in kept):
            kept.append(b)
    return kept


FUSERS: dict[str, Callable[[Sequence[Box7], FusionConfig], Box7]] = {
    "kbf": kbf_fuse_cluster,
    "wbf-p": lambda c, cfg: wbf_params(c),
    "wbf-c": lambda c, cfg: wbf_corners(c),
    "nms": lambda c, cfg: _select_top(c),
}


def fuse(props: ProposalSet | Sequence[Box7], cfg: FusionConfig, method: str = "kbf") -> list[Box7]:
    """Cluster proposals and fuse each cluster with ``method``.

    All methods share the same clustering so that only the fuser differs;
    ``"nms"`` keeps the highest-scoring member of each cluster.
    """
    boxes = props.boxes if isinstance(props, ProposalSet) else tuple(props)
    fuser = FUSERS[method.lower()]
    fused = [fuser([boxes[i] for i in members], cfg) for members in cluster_proposals(boxes, cfg)]
    return [fused[i] for i in canonical_order(fused)]


def kbf(props: ProposalSet | Sequence[Box7], cfg: FusionConfig) -> list[Box7]:
    """KDE Box Fusion of one frame's proposals, sorted by descending score."""
    return fuse(props, cfg, "kbf")
