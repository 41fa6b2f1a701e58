"""AP evaluation, a synthetic multi-detector scene generator and benchmark tables.

AP follows the KITTI R40 convention: precision is interpolated as the best
precision at any recall >= r and averaged over r = 1/40, 2/40, ..., 1.
Range bins are assigned by BEV distance of the box centre from the ego origin
and both predictions and ground truth are restricted to the bin.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fusion import TTA, augment_box, canonical_order, deaugment_box
from .geometry import Box7, EgoPose, bev_iou, normalize_angle, pairwise_iou, transform_box
from .io import Detection
from .pipeline import FrameInput, SequenceInput

INF = math.inf


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.7, 0.5)
    modes: tuple[str, ...] = ("bev", "3d")
    recall_positions: int = 40
    range_bins: tuple[tuple[float, float], ...] = ((0.0, 30.0), (30.0, 50.0), (50.0, INF))

    def __post_init__(self):
        if not all(0 < t <= 1 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must be in (0, 1]")
        for m in self.modes:
            if m not in ("bev", "3d"):
                raise ValueError(f"unknown IoU mode {m!r}")
        if self.recall_positions < 1:
            raise ValueError("recall_positions must be >= 1")
        bins = list(self.range_bins)
        for lo, hi in bins:
            if not lo < hi:
                raise ValueError(f"bad range bin [{lo}, {hi})")
        if any(b[0] < a[1] for a, b in zip(bins, bins[1:])):
            raise ValueError("range bins must be ordered and non-overlapping")


def bin_label(lo: float, hi: float) -> str:
    hi_s = "inf" if math.isinf(hi) else f"{hi:g}"
    return f"[{lo:g},{hi_s})"


def match_frame(preds: Sequence[Box7], gts: Sequence[Box7], threshold: float, mode: str = "3d") -> list[tuple[float, bool]]:
    """Greedy score-ordered matching; returns ``(score, is_tp)`` per prediction.

    Each prediction takes the unmatched ground truth it overlaps most, if
    that IoU reaches ``threshold``.
    """
    order = canonical_order(preds)
    iou = pairwise_iou([preds[i] for i in order], gts, mode)
    taken = np.zeros(len(gts), dtype=bool)
    out = []
    for row, i in enumerate(order):
        cand = np.where(taken, -1.0, iou[row]) if len(gts) else np.zeros(0)
        j = int(np.argmax(cand)) if cand.size else -1
        tp = j >= 0 and cand[j] >= threshold
        if tp:
            taken[j] = True
        out.append((preds[i].score, bool(tp)))
    return out


def average_precision(scored: Sequence[tuple[float, bool]], num_gt: int, recall_positions: int = 40) -> float:
    if num_gt == 0:
        return math.nan
    if not scored:
        return 0.0
    scores = np.array([s for s, _ in scored])
    tps = np.array([t for _, t in scored], dtype=float)
    order = np.argsort(-scores, kind="stable")
    tp_cum = np.cumsum(tps[order])
    precision = tp_cum / np.arange(1, len(order) + 1)
    recall = tp_cum / num_gt
    # best precision at any recall >= r
    best_from = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for k in range(1, recall_positions + 1):
        r = k / recall_positions
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        total += best_from[idx] if idx < len(recall) else 0.0
    return total / recall_positions


def _in_bin(box: Box7, lo: float, hi: float) -> bool:
    d = math.hypot(box.cx, box.cy)
    return lo <= d < hi


def evaluate_ap(
    predictions: Mapping[int, Sequence[Box7]],
    ground_truth: Mapping[int, Sequence[Box7]],
    cfg: EvalConfig | None = None,
) -> dict[tuple[float, str, str], float]:
    """AP keyed by ``(iou_threshold, mode, bin)``; ``bin`` is ``"all"`` or a range label.

    Bins without ground truth report NaN.
    """
    cfg = cfg or EvalConfig()
    extra = set(predictions) - set(ground_truth)
    if extra:
        raise ValueError(f"predictions for frames without ground truth: {sorted(extra)[:5]}")
    bins = [("all", 0.0, INF)] + [(bin_label(lo, hi), lo, hi) for lo, hi in cfg.range_bins]
    out = {}
    for name, lo, hi in bins:
        frames = {}
        num_gt = 0
        for f, gts in ground_truth.items():
            g = [b for b in gts if _in_bin(b, lo, hi)]
            p = [b for b in predictions.get(f, []) if _in_bin(b, lo, hi)]
            frames[f] = (p, g)
            num_gt += len(g)
        for mode in cfg.modes:
            for thr in cfg.iou_thresholds:
                scored = [m for p, g in frames.values() for m in match_frame(p, g, thr, mode)]
                out[(thr, mode, name)] = average_precision(scored, num_gt, cfg.recall_positions)
    return out


# --- synthetic scenes -----------------------------------------------------


@dataclass(frozen=True)
class DetectorNoise:
    """Error model of one simulated source detector.

    Errors are drawn once per (detector, object, frame) and shared by that
    detector's TTA variants, which add their own smaller jitter
    (``tta_jitter`` as a fraction of each sigma). With ``outlier_prob`` the
    shared draw is a gross error instead: the centre slides along the heading
    or the length is badly off, as for partially observed vehicles.
    ``dropout_1f``/``dropout_16f`` are step curves ``((range_from, p_miss), ...)``;
    the last breakpoint at or below the object's range applies. All sigmas
    grow linearly with range, doubling at ``range_noise_scale`` metres.
    """

    name: str = "det"
    center_sigma: float = 0.09
    dim_sigma: float = 0.06
    heading_sigma: float = 0.04
    flip_prob: float = 0.1
    tta_flip_prob: float = 0.05
    outlier_prob: float = 0.15
    outlier_shift: tuple[float, float] = (0.8, 1.6)
    outlier_length: tuple[float, float] = (0.8, 1.5)
    dim_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dropout_1f: tuple[tuple[float, float], ...] = ((0.0, 0.05), (30.0, 0.25), (50.0, 0.6))
    dropout_16f: tuple[tuple[float, float], ...] = ((0.0, 0.05), (30.0, 0.1), (50.0, 0.25))
    fp_rate: float = 0.5
    score_mean: float = 0.85
    score_sigma: float = 0.07
    score_range_slope: float = 0.003
    score_error_slope: float = 0.3
    tta_jitter: float = 0.35
    tta_dropout: float = 0.1
    range_noise_scale: float = 50.0

    def __post_init__(self):
        probs = (self.flip_prob, self.tta_flip_prob, self.outlier_prob, self.tta_dropout,
                 *(q for _, q in self.dropout_1f), *(q for _, q in self.dropout_16f))
        if not all(0 <= p <= 1 for p in probs):
            raise ValueError("probabilities must be in [0, 1]")
        if min(self.center_sigma, self.dim_sigma, self.heading_sigma, self.score_sigma, self.fp_rate) < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0 <= self.tta_jitter <= 1:
            raise ValueError("tta_jitter must be in [0, 1]")


def dropout_prob(curve: Sequence[tuple[float, float]], rng_m: float) -> float:
    p = 0.0
    for start, prob in curve:
        if rng_m >= start:
            p = prob
    return p


def _default_detectors() -> tuple[DetectorNoise, ...]:
    return (
        DetectorNoise("src_a", dim_bias=(0.03, 0.01, 0.0)),
        DetectorNoise("src_b", dim_bias=(-0.02, -0.01, 0.01), heading_sigma=0.05),
        DetectorNoise("src_c", dim_bias=(0.0, 0.02, -0.01), center_sigma=0.11),
        DetectorNoise("src_d", dim_bias=(-0.03, 0.0, 0.0), flip_prob=0.15, outlier_prob=0.2),
    )


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 200
    n_static_vehicles: int = 20
    n_dynamic_vehicles: int = 10
    detectors: tuple[DetectorNoise, ...] = field(default_factory=_default_detectors)
    ego_speed: float = 0.5
    ego_sway: float = 2.0
    sensor_range: float = 75.0
    static_16f_noise_scale: float = 0.5
    dynamic_16f_noise_scale: float = 1.5
    trail_period: int = 25
    trail_length: int = 12
    trail_prob: float = 0.8
    with_points: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1 or self.n_static_vehicles < 0 or self.n_dynamic_vehicles < 0:
            raise ValueError("frame and vehicle counts must be non-negative (n_frames >= 1)")
        if not 0 <= self.trail_prob <= 1:
            raise ValueError("trail_prob must be in [0, 1]")

    def without_noise(self) -> "SynthConfig":
        """Same scene with perfect detectors (no noise, dropout, flips or false positives)."""
        from dataclasses import replace

        clean = tuple(
            replace(
                d,
                center_sigma=0.0, dim_sigma=0.0, heading_sigma=0.0, flip_prob=0.0, tta_flip_prob=0.0,
                outlier_prob=0.0, dim_bias=(0.0, 0.0, 0.0), dropout_1f=((0.0, 0.0),), dropout_16f=((0.0, 0.0),),
                fp_rate=0.0, score_sigma=0.0, tta_dropout=0.0,
            )
            for d in self.detectors
        )
        return replace(self, detectors=clean, trail_prob=0.0)


@dataclass(frozen=True)
class Vehicle:
    vid: int
    l: float
    w: float
    h: float
    x0: float
    y0: float
    heading: float
    speed: float = 0.0  # metres per frame along the heading

    @property
    def dynamic(self) -> bool:
        return self.speed != 0.0

    def box(self, frame: int, **kw) -> Box7:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return Box7(
            self.x0 + c * self.speed * frame,
            self.y0 + s * self.speed * frame,
            0.5 * self.h,
            self.l, self.w, self.h, self.heading, frame_idx=frame, **kw,
        )


@dataclass
class SyntheticScene:
    sequence: SequenceInput
    ground_truth: dict[int, list[Box7]]
    vehicles: list[Vehicle]
    config: SynthConfig


def _ego_pose(cfg: SynthConfig, k: int) -> EgoPose:
    x = cfg.ego_speed * k
    y = cfg.ego_sway * math.sin(2 * math.pi * k / 400.0)
    dy = cfg.ego_sway * 2 * math.pi / 400.0 * math.cos(2 * math.pi * k / 400.0)
    yaw = math.atan2(dy, cfg.ego_speed) if cfg.ego_speed > 0 else 0.0
    return EgoPose.from_yaw(yaw, (x, y, 0.0), k)


def _vehicles(cfg: SynthConfig, rng: np.random.Generator) -> list[Vehicle]:
    span = cfg.ego_speed * cfg.n_frames
    out = []
    footprints = []
    while len(out) < cfg.n_static_vehicles:
        side = 1.0 if rng.random() < 0.5 else -1.0
        perpendicular = rng.random() < 0.3
        heading = (math.pi / 2 if perpendicular else 0.0) + (math.pi if rng.random() < 0.5 else 0.0)
        heading = normalize_angle(heading + rng.normal(0, 0.05))
        y = side * (rng.uniform(8.0, 12.0) if perpendicular else rng.uniform(5.0, 7.0))
        v = Vehicle(len(out), float(rng.normal(4.6, 0.3)), float(rng.normal(1.9, 0.08)), float(rng.normal(1.65, 0.08)),
                    float(rng.uniform(-50.0, span + 50.0)), float(y), float(heading))
        # parked cars keep at least 0.5 m clearance
        fp = Box7(v.x0, v.y0, 0.0, v.l + 1.0, v.w + 1.0, 1.0, v.heading)
        if any(bev_iou(fp, other) > 0.0 for other in footprints):
            continue
        footprints.append(fp)
        out.append(v)
    for j in range(cfg.n_dynamic_vehicles):
        forward = rng.random() < 0.5
        heading = 0.0 if forward else math.pi
        y = -2.0 if forward else 2.0
        speed = float(rng.uniform(0.6, 1.4))
        x0 = float(rng.uniform(-60.0, span + 60.0))
        out.append(
            Vehicle(cfg.n_static_vehicles + j, float(rng.normal(4.6, 0.3)), float(rng.normal(1.9, 0.08)),
                    float(rng.normal(1.65, 0.08)), x0, y, heading, speed)
        )
    return out


def _tta_variants(rng: np.random.Generator) -> list[TTA]:
    flips = [(True, False), (False, True), (True, True)]
    fx, fy = flips[rng.integers(len(flips))]
    rot = float(rng.uniform(-math.pi, math.pi))
    fx2, fy2 = flips[rng.integers(len(flips))]
    rot2 = float(rng.uniform(-math.pi, math.pi))
    return [TTA(), TTA(fx, fy), TTA(rot=rot), TTA(fx2, fy2, rot2)]


def _noisy(gt: Box7, det: DetectorNoise, scale: float, shared, rng) -> Box7:
    """One proposal: the shared per-detector error plus per-TTA jitter."""
    e_c, e_d, e_h, flipped = shared
    j = det.tta_jitter * scale
    cx = gt.cx + e_c[0] + rng.normal(0, j * det.center_sigma)
    cy = gt.cy + e_c[1] + rng.normal(0, j * det.center_sigma)
    cz = gt.cz + e_c[2] + rng.normal(0, j * 0.5 * det.center_sigma)
    dims = [
        max(v * (1 + b) + e + rng.normal(0, j * det.dim_sigma), 0.3)
        for v, b, e in zip((gt.l, gt.w, gt.h), det.dim_bias, e_d)
    ]
    heading = gt.heading + e_h + rng.normal(0, j * det.heading_sigma)
    if flipped != (rng.random() < det.tta_flip_prob):
        heading += math.pi
    return Box7(cx, cy, cz, *dims, heading, frame_idx=gt.frame_idx, class_id=gt.class_id)


def _score(det: DetectorNoise, rng_m: float, err: float, rng) -> float:
    s = det.score_mean - det.score_range_slope * rng_m - det.score_error_slope * err + rng.normal(0, det.score_sigma)
    return float(min(max(s, 0.05), 0.99))


def _shared_error(gt: Box7, det: DetectorNoise, scale: float, rng):
    sd = math.sqrt(1.0 - det.tta_jitter**2) * scale
    e_c = rng.normal(0, sd * det.center_sigma, 3) * np.array([1.0, 1.0, 0.5])
    e_d = rng.normal(0, sd * det.dim_sigma, 3)
    e_h = rng.normal(0, sd * det.heading_sigma)
    flipped = rng.random() < det.flip_prob
    gross = 0.0
    if rng.random() < det.outlier_prob:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if rng.random() < 0.5:
            gross = sign * rng.uniform(*det.outlier_shift)
            e_c[0] += gross * math.cos(gt.heading)
            e_c[1] += gross * math.sin(gt.heading)
        else:
            gross = sign * rng.uniform(*det.outlier_length)
            e_d[0] += gross
    err = float(np.linalg.norm(e_c[:2]) + np.abs(e_d).sum() + abs(gross))
    return (e_c, e_d, e_h, flipped), err


def _emit(gt_ego: Box7, det: DetectorNoise, stream: str, noise_scale: float, variants, rng, dets):
    rng_m = math.hypot(gt_ego.cx, gt_ego.cy)
    curve = det.dropout_1f if stream == "1f" else det.dropout_16f
    if rng.random() < dropout_prob(curve, rng_m):
        return
    scale = noise_scale * (1.0 + rng_m / det.range_noise_scale)
    shared, err = _shared_error(gt_ego, det, scale, rng)
    base_score = _score(det, rng_m, err, rng)
    for k, tta in enumerate(variants):
        if k > 0 and rng.random() < det.tta_dropout:
            continue
        box = _noisy(gt_ego, det, scale, shared, rng)
        score = float(min(max(base_score + rng.normal(0, 0.02 if det.score_sigma > 0 else 0.0), 0.01), 0.99))
        box = box.replace(score=score, detector_id=det.name)
        dets.append(Detection(augment_box(box, tta), tta, stream))


def _false_positives(det: DetectorNoise, frame: int, stream: str, variants, cfg: SynthConfig, rng, dets):
    for _ in range(rng.poisson(det.fp_rate)):
        r = rng.uniform(5.0, cfg.sensor_range)
        a = rng.uniform(-math.pi, math.pi)
        base = Box7(r * math.cos(a), r * math.sin(a), 0.8, rng.normal(4.0, 0.5) % 6 + 1.0, 1.8, 1.5,
                    rng.uniform(-math.pi, math.pi), frame_idx=frame)
        score = float(rng.uniform(0.1, 0.6))
        for tta in variants:
            if rng.random() < 0.2:
                continue
            box = base.replace(
                cx=base.cx + rng.normal(0, 0.2), cy=base.cy + rng.normal(0, 0.2),
                score=float(min(max(score + rng.normal(0, 0.03), 0.01), 0.99)), detector_id=det.name,
            )
            dets.append(Detection(augment_box(box, tta), tta, stream))


def _points_for(gt_ego: Sequence[Box7], rng) -> np.ndarray:
    chunks = [rng.uniform(-60, 60, (300, 3)) * np.array([1.0, 1.0, 0.0]) + np.array([0.0, 0.0, -0.25])]
    for b in gt_ego:
        r = max(math.hypot(b.cx, b.cy), 5.0)
        n = int(min(max(4000.0 / r**1.5, 3), 400))
        local = rng.uniform(-0.45, 0.45, (n, 3)) * np.array([b.l, b.w, b.h])
        c, s = math.cos(b.heading), math.sin(b.heading)
        pts = np.column_stack([
            b.cx + c * local[:, 0] - s * local[:, 1],
            b.cy + s * local[:, 0] + c * local[:, 1],
            b.cz + local[:, 2],
        ])
        chunks.append(pts)
    return np.vstack(chunks).astype(np.float32).astype(float)


def generate_scene(cfg: SynthConfig | None = None) -> SyntheticScene:
    """Simulate one sequence of multi-detector, multi-TTA detections.

    Static vehicles are parked beside a straight road, dynamic vehicles drive
    in its two lanes. Each detector emits 1-frame and 16-frame proposals under
    four TTA variants, in each variant's augmented ego frame. 16-frame
    proposals are tighter for static vehicles and looser for moving ones, and
    moving vehicles leave short-lived static "trail" proposals behind them.
    Everything is drawn from a single seeded generator.
    """
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    vehicles = _vehicles(cfg, rng)
    trails = []  # (anchor box in world, first frame, last frame)
    for v in vehicles:
        if v.dynamic and cfg.trail_prob > 0:
            for a in range(0, cfg.n_frames, cfg.trail_period):
                trails.append((v.box(a), a + 1, a + cfg.trail_length))
    frames = []
    gt: dict[int, list[Box7]] = {}
    for k in range(cfg.n_frames):
        pose = _ego_pose(cfg, k)
        inv = pose.inverse()
        gt_k = []
        kinds = []
        for v in vehicles:
            b = transform_box(v.box(k), inv)
            if math.hypot(b.cx, b.cy) <= cfg.sensor_range:
                gt_k.append(b.replace(detector_id="gt"))
                kinds.append(v.dynamic)
        gt[k] = gt_k
        dets: list[Detection] = []
        for det in cfg.detectors:
            variants = _tta_variants(rng)
            for b, dyn in zip(gt_k, kinds):
                _emit(b, det, "1f", 1.0, variants, rng, dets)
                scale = cfg.dynamic_16f_noise_scale if dyn else cfg.static_16f_noise_scale
                _emit(b, det, "16f", scale, variants, rng, dets)
            for anchor, f0, f1 in trails:
                if f0 <= k <= f1 and rng.random() < cfg.trail_prob:
                    b = transform_box(anchor.replace(frame_idx=k), inv)
                    if math.hypot(b.cx, b.cy) <= cfg.sensor_range:
                        _emit(b, det, "16f", 1.0, variants, rng, dets)
            _false_positives(det, k, "1f", variants, cfg, rng, dets)
            _false_positives(det, k, "16f", variants, cfg, rng, dets)
        points = _points_for(gt_k, rng) if cfg.with_points else None
        frames.append(FrameInput(k, pose, tuple(dets), points))
    return SyntheticScene(SequenceInput(tuple(frames), f"synth-{cfg.seed}"), gt, vehicles, cfg)


def source_predictions(seq: SequenceInput, detector: str, stream: str = "1f") -> dict[int, list[Box7]]:
    """A single source detector's un-augmented proposals per frame."""
    out = {}
    for f in seq.frames:
        out[f.frame_idx] = [
            deaugment_box(d.box, d.tta)
            for d in f.detections
            if d.box.detector_id == detector and d.stream == stream and d.tta == TTA()
        ]
    return out


# --- reporting ------------------------------------------------------------


def benchmark_report(results: Mapping[str, Mapping[tuple[float, str, str], float]], threshold: float = 0.7):
    """Format AP tables per method; returns ``(text, records)``.

    Rows are sorted by method name. Range columns are range-binned R40 AP_3D
    at ``threshold`` (not the Waymo L2/APH metric).
    """
    if not results:
        raise ValueError("benchmark_report needs at least one evaluated method")
    bins = sorted(
        {k[2] for table in results.values() for k in table if k[2] != "all"},
        key=lambda s: float(s[1:].split(",")[0]),
    )
    header = ["method", f"AP_BEV@{threshold:g}", f"AP_3D@{threshold:g}"] + [f"3D {b}" for b in bins]
    rows, records = [], []
    for method in sorted(results):
        table = results[method]
        bev = table.get((threshold, "bev", "all"), math.nan)
        ap3 = table.get((threshold, "3d", "all"), math.nan)
        per_bin = [table.get((threshold, "3d", b), math.nan) for b in bins]
        rows.append([method] + [f"{100 * v:6.2f}" for v in [bev, ap3] + per_bin])
        records.append({
            "method": method,
            "iou": threshold,
            "ap_bev": None if math.isnan(bev) else bev,
            "ap_3d": None if math.isnan(ap3) else ap3,
            "ap_3d_range": {b: (None if math.isnan(v) else v) for b, v in zip(bins, per_bin)},
        })
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["range-binned columns: R40 AP_3D by BEV centre distance"]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines), records


def records_to_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
