"""Oriented 3D boxes, ego poses and the overlap tests built on them.

Boxes are 7-DOF: centre (cx, cy, cz), size (l, w, h) with ``l`` along the
heading, and a yaw ``heading`` about +z. Headings are kept in (-pi, pi]
everywhere in the package.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
FUSED_ID = "fused"

_EPS = 1e-9


def normalize_angle(angle: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    r = math.remainder(angle, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def normalize_angles(angles: np.ndarray) -> np.ndarray:
    r = np.remainder(np.asarray(angles, dtype=float) + math.pi, TWO_PI) - math.pi
    return np.where(r <= -math.pi, r + TWO_PI, r)


@dataclass(frozen=True, slots=True)
class Box7:
    """A scored, oriented 3D box with provenance."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    heading: float
    score: float = 1.0
    class_id: int = 0
    detector_id: str = ""
    frame_idx: int = 0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got {(self.l, self.w, self.h)}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.frame_idx < 0:
            raise ValueError(f"frame_idx must be non-negative, got {self.frame_idx}")
        heading = normalize_angle(self.heading)
        if heading != self.heading:
            object.__setattr__(self, "heading", heading)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def params(self) -> tuple[float, ...]:
        """(cx, cy, cz, l, w, h, heading)."""
        return (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.heading)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def replace(self, **changes) -> "Box7":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_params(cls, params: Sequence[float], **kwargs) -> "Box7":
        cx, cy, cz, l, w, h, heading = (float(p) for p in params)
        return cls(cx, cy, cz, l, w, h, heading, **kwargs)


def boxes_to_array(boxes: Sequence[Box7]) -> np.ndarray:
    """Stack boxes into an (N, 8) array of (cx, cy, cz, l, w, h, heading, score)."""
    if not boxes:
        return np.zeros((0, 8))
    return np.array([b.params + (b.score,) for b in boxes], dtype=float)


def _quat_to_matrix(q: Sequence[float]) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / math.sqrt(sum(c * c for c in q))
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(R: np.ndarray) -> tuple[float, float, float, float]:
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(R).as_quat()
    if w < 0:
        w, x, y, z = -w, -x, -y, -z
    return (float(w), float(x), float(y), float(z))


@dataclass(frozen=True, slots=True)
class EgoPose:
    """Ego-to-world rigid transform for one frame.

    The orientation is stored as a unit quaternion ``(w, x, y, z)`` so that
    poses survive a serialization round trip unchanged; ``rotation`` is the
    equivalent 3x3 matrix.
    """

    translation: tuple[float, float, float]
    quaternion: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    frame_idx: int = 0
    rotation: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation)
        q = tuple(float(v) for v in self.quaternion)
        if len(t) != 3 or len(q) != 4:
            raise ValueError("pose needs a 3-vector translation and a 4-vector quaternion")
        norm = math.sqrt(sum(c * c for c in q))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion must be unit length, got norm {norm}")
        if self.frame_idx < 0:
            raise ValueError(f"frame_idx must be non-negative, got {self.frame_idx}")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "rotation", _quat_to_matrix(q))

    @classmethod
    def from_matrix(cls, rotation, translation, frame_idx: int = 0) -> "EgoPose":
        R = np.asarray(rotation, dtype=float)
        if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be an orthonormal 3x3 matrix")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        return cls(tuple(translation), _matrix_to_quat(R), frame_idx)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0), frame_idx: int = 0) -> "EgoPose":
        half = 0.5 * yaw
        return cls(tuple(translation), (math.cos(half), 0.0, 0.0, math.sin(half)), frame_idx)

    @property
    def yaw(self) -> float:
        R = self.rotation
        return math.atan2(R[1, 0], R[0, 0])

    def inverse(self) -> "EgoPose":
        w, x, y, z = self.quaternion
        t = -self.rotation.T @ np.asarray(self.translation)
        return EgoPose(tuple(t), (w, -x, -y, -z), self.frame_idx)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of points from ego to world."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return pts @ self.rotation.T + np.asarray(self.translation)


def transform_box(box: Box7, pose: EgoPose) -> Box7:
    """Apply ``pose`` to a box: centre by R @ c + t, heading by the pose yaw."""
    c = pose.rotation @ box.center + np.asarray(pose.translation)
    return dataclasses.replace(
        box,
        cx=float(c[0]),
        cy=float(c[1]),
        cz=float(c[2]),
        heading=normalize_angle(box.heading + pose.yaw),
    )


# --- BEV polygon geometry -------------------------------------------------


def bev_corners(box: Box7) -> list[tuple[float, float]]:
    """Counter-clockwise BEV corners of a box."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    out = []
    for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((box.cx + c * dx - s * dy, box.cy + s * dx + c * dy))
    return out


def corners_3d(box: Box7) -> np.ndarray:
    """(8, 3) corners; rows 0-3 are the bottom face, 4-7 the top face."""
    bev = np.array(bev_corners(box))
    lo = np.column_stack([bev, np.full(4, box.cz - 0.5 * box.h)])
    hi = np.column_stack([bev, np.full(4, box.cz + 0.5 * box.h)])
    return np.vstack([lo, hi])


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    """Signed shoelace area (positive for counter-clockwise vertices)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_convex(subject: list[tuple[float, float]], clipper: list[tuple[float, float]]):
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW ``clipper``."""
    output = subject
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sq >= 0:
                if sp < 0:
                    t = sp / (sp - sq)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
                output.append((qx, qy))
            elif sp >= 0:
                t = sp / (sp - sq)
                output.append((px + t * (qx - px), py + t * (qy - py)))
    return _dedupe(output)


def _dedupe(poly):
    out = []
    for p in poly:
        if not out or abs(p[0] - out[-1][0]) > _EPS or abs(p[1] - out[-1][1]) > _EPS:
            out.append(p)
    if len(out) > 1 and abs(out[0][0] - out[-1][0]) <= _EPS and abs(out[0][1] - out[-1][1]) <= _EPS:
        out.pop()
    return out


def _may_overlap(a: Box7, b: Box7) -> bool:
    reach = 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w))
    return (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 <= reach * reach


def bev_intersection(a: Box7, b: Box7) -> float:
    """Area of overlap of the two rotated BEV rectangles."""
    if not _may_overlap(a, b):
        return 0.0
    return max(polygon_area(clip_convex(bev_corners(a), bev_corners(b))), 0.0)


def bev_iou(a: Box7, b: Box7) -> float:
    inter = bev_intersection(a, b)
    union = a.l * a.w + b.l * b.w - inter
    if inter <= 0.0 or union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def iou_3d(a: Box7, b: Box7) -> float:
    dz = min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h) - max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    union = a.volume + b.volume - inter
    if inter <= 0.0 or union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def pairwise_iou(boxes_a: Sequence[Box7], boxes_b: Sequence[Box7], mode: str = "bev") -> np.ndarray:
    """IoU matrix between two box lists; ``mode`` is ``"bev"`` or ``"3d"``.

    Pairs whose circumscribed circles cannot touch are skipped.
    """
    fn = {"bev": bev_iou, "3d": iou_3d}[mode.lower()]
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not len(boxes_a) or not len(boxes_b):
        return out
    ca = np.array([(b.cx, b.cy) for b in boxes_a])
    cb = np.array([(b.cx, b.cy) for b in boxes_b])
    ra = np.array([0.5 * math.hypot(b.l, b.w) for b in boxes_a])
    rb = np.array([0.5 * math.hypot(b.l, b.w) for b in boxes_b])
    d2 = ((ca[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
    near = d2 <= (ra[:, None] + rb[None, :]) ** 2
    for i, j in zip(*np.nonzero(near)):
        out[i, j] = fn(boxes_a[i], boxes_b[j])
    return out


def points_in_box(box: Box7, points: Iterable) -> int:
    """Count points inside the oriented box; the boundary counts as inside."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        return 0
    d = pts - box.center
    c, s = math.cos(box.heading), math.sin(box.heading)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    inside = (
        (np.abs(lx) <= 0.5 * box.l + _EPS)
        & (np.abs(ly) <= 0.5 * box.w + _EPS)
        & (np.abs(d[:, 2]) <= 0.5 * box.h + _EPS)
    )
    return int(inside.sum())
