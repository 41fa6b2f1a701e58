"""JSON-lines and binary file formats read and written by the pipeline.

Detections::

    {"frame": 3, "detector": "lyft_second", "tta": {"flip_x": false, "flip_y": true, "rot": 0.4},
     "stream": "1f", "box": [cx, cy, cz, l, w, h, heading], "score": 0.81, "class": 0}

Poses::

    {"frame": 3, "t": [x, y, z], "q": [w, x, y, z]}

Points (binary, repeated per frame): ``uint32 count, uint32 frame`` followed by
``count`` little-endian float32 xyz triples.

Pseudo-labels: a header ``{"version": 1, "config_hash": ...}`` then one
``{"frame", "box", "score", "class", "provenance"}`` record per box.
"""

from __future__ import annotations

import glob as _glob
import json
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .fusion import TTA
from .geometry import Box7, EgoPose

FORMAT_VERSION = 1
STREAMS = ("1f", "16f")
PROVENANCES = ("fused-1f", "tracked-1f", "static-refined", "static-propagated")


class FormatError(ValueError):
    """A record in an input file does not match its schema."""


@dataclass(frozen=True)
class Detection:
    box: Box7
    tta: TTA = TTA()
    stream: str = "1f"


@dataclass(frozen=True)
class PseudoLabel:
    box: Box7
    provenance: str


@dataclass(frozen=True)
class PseudoLabelSet:
    labels: tuple[PseudoLabel, ...]
    config_hash: str = ""

    def by_frame(self) -> dict[int, list[PseudoLabel]]:
        out: dict[int, list[PseudoLabel]] = {}
        for lab in self.labels:
            out.setdefault(lab.box.frame_idx, []).append(lab)
        return out

    def boxes_by_frame(self) -> dict[int, list[Box7]]:
        return {f: [lab.box for lab in labs] for f, labs in self.by_frame().items()}

    def __len__(self):
        return len(self.labels)


def _records(path) -> Iterator[tuple[int, dict]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def _require(rec: dict, key: str, types, where: str):
    if key not in rec:
        raise FormatError(f"{where}: missing field {key!r}")
    val = rec[key]
    if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise FormatError(f"{where}: field {key!r} has the wrong type")
    if not isinstance(val, types):
        raise FormatError(f"{where}: field {key!r} has the wrong type")
    return val


def _vector(rec: dict, key: str, n: int, where: str) -> list[float]:
    val = _require(rec, key, list, where)
    if len(val) != n or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
        raise FormatError(f"{where}: field {key!r} must be a list of {n} numbers")
    return [float(v) for v in val]


def _box(rec: dict, where: str, **extra) -> Box7:
    params = _vector(rec, "box", 7, where)
    score = float(_require(rec, "score", (int, float), where))
    class_id = _require(rec, "class", int, where)
    try:
        return Box7.from_params(params, score=score, class_id=class_id, **extra)
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None


def _box_list(box: Box7) -> list[float]:
    return [box.cx, box.cy, box.cz, box.l, box.w, box.h, box.heading]


def _dump(rec: dict) -> str:
    return json.dumps(rec, separators=(", ", ": ")) + "\n"


# --- detections -----------------------------------------------------------


def expand_paths(paths: str | os.PathLike | Sequence) -> list[str]:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    out = []
    for p in paths:
        matches = sorted(_glob.glob(os.fspath(p)))
        if not matches:
            raise FileNotFoundError(f"no files match {os.fspath(p)!r}")
        out.extend(matches)
    return out


def load_detections(paths) -> list[Detection]:
    dets = []
    for path in expand_paths(paths):
        last = -1
        for lineno, rec in _records(path):
            where = f"{path}:{lineno}"
            frame = _require(rec, "frame", int, where)
            if frame < 0:
                raise FormatError(f"{where}: frame must be non-negative")
            if frame < last:
                raise FormatError(f"{where}: frames must be non-decreasing within a file")
            last = frame
            detector = _require(rec, "detector", str, where)
            stream = _require(rec, "stream", str, where)
            if stream not in STREAMS:
                raise FormatError(f"{where}: stream must be one of {STREAMS}")
            tta_rec = rec.get("tta", {})
            if not isinstance(tta_rec, dict):
                raise FormatError(f"{where}: field 'tta' must be an object")
            tta = TTA(
                bool(tta_rec.get("flip_x", False)),
                bool(tta_rec.get("flip_y", False)),
                float(tta_rec.get("rot", 0.0)),
            )
            box = _box(rec, where, detector_id=detector, frame_idx=frame)
            dets.append(Detection(box, tta, stream))
    return dets


def save_detections(dets: Iterable[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(
                _dump(
                    {
                        "frame": d.box.frame_idx,
                        "detector": d.box.detector_id,
                        "tta": {"flip_x": d.tta.flip_x, "flip_y": d.tta.flip_y, "rot": d.tta.rot},
                        "stream": d.stream,
                        "box": _box_list(d.box),
                        "score": d.box.score,
                        "class": d.box.class_id,
                    }
                )
            )


# --- poses ----------------------------------------------------------------


def load_poses(path) -> dict[int, EgoPose]:
    poses: dict[int, EgoPose] = {}
    last = -1
    for lineno, rec in _records(path):
        where = f"{path}:{lineno}"
        frame = _require(rec, "frame", int, where)
        if frame <= last:
            raise FormatError(f"{where}: pose frames must be strictly increasing")
        last = frame
        t = _vector(rec, "t", 3, where)
        q = _vector(rec, "q", 4, where)
        try:
            poses[frame] = EgoPose(tuple(t), tuple(q), frame)
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from None
    return poses


def save_poses(poses: dict[int, EgoPose] | Iterable[EgoPose], path) -> None:
    items = poses.values() if isinstance(poses, dict) else poses
    with open(path, "w") as fh:
        for p in sorted(items, key=lambda p: p.frame_idx):
            fh.write(_dump({"frame": p.frame_idx, "t": list(p.translation), "q": list(p.quaternion)}))


# --- points ---------------------------------------------------------------

_HEADER = struct.Struct("<II")


def save_points(points: dict[int, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        for frame in sorted(points):
            pts = np.ascontiguousarray(points[frame], dtype="<f4").reshape(-1, 3)
            fh.write(_HEADER.pack(pts.shape[0], frame))
            fh.write(pts.tobytes())


def load_points(path) -> dict[int, np.ndarray]:
    out: dict[int, np.ndarray] = {}
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0
    while off < len(data):
        if off + _HEADER.size > len(data):
            raise FormatError(f"{path}: truncated frame header at byte {off}")
        count, frame = _HEADER.unpack_from(data, off)
        off += _HEADER.size
        nbytes = 12 * count
        if off + nbytes > len(data):
            raise FormatError(f"{path}: frame {frame} declares {count} points but the file is truncated")
        out[frame] = np.frombuffer(data, dtype="<f4", count=3 * count, offset=off).reshape(-1, 3).astype(float)
        off += nbytes
    return out


# --- pseudo-labels --------------------------------------------------------


def save_pseudo_labels(labels: PseudoLabelSet, path) -> None:
    with open(path, "w") as fh:
        fh.write(_dump({"version": FORMAT_VERSION, "config_hash": labels.config_hash}))
        for lab in labels.labels:
            fh.write(
                _dump(
                    {
                        "frame": lab.box.frame_idx,
                        "box": _box_list(lab.box),
                        "score": lab.box.score,
                        "class": lab.box.class_id,
                        "provenance": lab.provenance,
                    }
                )
            )


def load_pseudo_labels(path) -> PseudoLabelSet:
    labels = []
    header = None
    for lineno, rec in _records(path):
        where = f"{path}:{lineno}"
        if header is None:
            if rec.get("version") != FORMAT_VERSION:
                raise FormatError(f"{where}: expected header with version {FORMAT_VERSION}")
            header = rec
            continue
        frame = _require(rec, "frame", int, where)
        prov = _require(rec, "provenance", str, where)
        labels.append(PseudoLabel(_box(rec, where, detector_id=prov, frame_idx=frame), prov))
    if header is None:
        raise FormatError(f"{path}: missing header record")
    return PseudoLabelSet(tuple(labels), str(header.get("config_hash", "")))


def load_boxes(path) -> dict[int, list[Box7]]:
    """Read per-frame boxes from a label file (pseudo-label or ground-truth)."""
    return load_pseudo_labels(path).boxes_by_frame()
