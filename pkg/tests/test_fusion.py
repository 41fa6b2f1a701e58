import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_box
from pseudofuse.fusion import (
    TTA,
    Bandwidths,
    FusionConfig,
    ProposalSet,
    augment_box,
    cluster_proposals,
    deaugment_box,
    fuse,
    kbf,
    kbf_fuse_cluster,
    nms,
    wbf_corners,
    wbf_params,
)
from pseudofuse.geometry import Box7, bev_iou, iou_3d

CFG = FusionConfig()


def car(x=0.0, y=0.0, heading=0.0, score=0.8, det="a"):
    return Box7(x, y, 0.0, 4.5, 1.9, 1.6, heading, score=score, detector_id=det)


def brute_nms(boxes, thr):
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    alive = set(order)
    out = []
    for i in order:
        if i not in alive:
            continue
        out.append(i)
        for j in order:
            if j != i and j in alive and j not in out and bev_iou(boxes[i], boxes[j]) > thr:
                alive.discard(j)
    return [boxes[i] for i in out]


class TestTTA:
    def test_identity(self):
        b = car(1, 2, 0.3)
        assert deaugment_box(b, TTA()) == b

    def test_flip_about_x_axis(self):
        b = deaugment_box(Box7(1, 2, 0, 4, 2, 1.5, 0.3), TTA(flip_x=True))
        assert (b.cx, b.cy, b.cz, b.heading) == pytest.approx((1, -2, 0, -0.3), abs=1e-12)

    def test_inverse_quarter_turn(self):
        b = deaugment_box(Box7(0, 1, 0, 4, 2, 1.5, math.pi / 2), TTA(rot=math.pi / 2))
        assert (b.cx, b.cy, b.heading) == pytest.approx((1, 0, 0), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.booleans(), st.booleans(), st.floats(-math.pi, math.pi))
    def test_round_trip(self, seed, fx, fy, rot):
        b = random_box(np.random.default_rng(seed), spread=60)
        for tta in (TTA(), TTA(fx, fy, 0.0), TTA(False, False, rot), TTA(fx, fy, rot)):
            back = deaugment_box(augment_box(b, tta), tta)
            assert back.params[:6] == pytest.approx(b.params[:6], abs=1e-9)
            assert math.cos(back.heading - b.heading) == pytest.approx(1.0, abs=1e-12)


class TestClustering:
    def test_one_cluster(self, rng):
        boxes = [car(*rng.uniform(-0.25, 0.25, 2)) for _ in range(5)]
        assert cluster_proposals(boxes, CFG) == [[0, 1, 2, 3, 4]]

    def test_below_min_size(self):
        assert cluster_proposals([car()] * 3, CFG) == []

    def test_two_groups(self):
        boxes = [car(0, 0.1 * i) for i in range(6)] + [car(10, 0.1 * i) for i in range(6)]
        clusters = cluster_proposals(boxes, CFG)
        assert sorted(map(sorted, clusters)) == [list(range(6)), list(range(6, 12))]

    def test_empty(self):
        assert cluster_proposals([], CFG) == []

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_disjoint_subset(self, seed):
        r = np.random.default_rng(seed)
        boxes = [random_box(r, spread=6) for _ in range(int(r.integers(0, 40)))]
        clusters = cluster_proposals(boxes, FusionConfig(min_cluster_size=2))
        flat = [i for c in clusters for i in c]
        assert len(flat) == len(set(flat))
        assert set(flat) <= set(range(len(boxes)))
        for c in clusters:
            assert len(c) >= 2

    def test_proposal_set_frame_check(self):
        with pytest.raises(ValueError):
            ProposalSet((car(), car().replace(frame_idx=1)))
        assert ProposalSet((car(det="a"), car(det="b"), car(det="a"))).source_count == 2


class TestKbfCluster:
    def test_identical_members(self):
        b = car(1, 2, 0.4, score=0.6)
        fused = kbf_fuse_cluster([b] * 5, CFG)
        assert fused.params == b.params and fused.score == 0.6

    def test_heading_cluster_of_three(self):
        fused = kbf_fuse_cluster([car(heading=h) for h in (0.1, 0.1, 0.1, 2.0)], CFG)
        assert fused.heading == 0.1

    def test_centre_dense_cluster(self):
        members = [car(x, score=s) for x, s in zip((0, 0.05, 0.1, 3.0), (0.9, 0.9, 0.9, 0.2))]
        assert kbf_fuse_cluster(members, Bandwidths(center=1.0)).cx == 0.05

    def test_flip_outlier_is_rejected(self):
        members = [car(heading=0.3, score=0.8)] * 3 + [car(heading=0.3 + math.pi - 0.02, score=0.9)]
        assert kbf_fuse_cluster(members, CFG).heading == pytest.approx(0.3)

    def test_empty(self):
        with pytest.raises(ValueError):
            kbf_fuse_cluster([], CFG)


class TestKbf:
    def test_empty(self):
        assert kbf(ProposalSet(()), CFG) == []

    def test_two_objects(self):
        boxes = [car(0, 0.1 * i) for i in range(6)] + [car(10, 0.1 * i) for i in range(6)]
        assert len(kbf(boxes, CFG)) == 2

    def test_sixteen_noisy_proposals(self):
        rng = np.random.default_rng(7)
        fused_iou, per_det = [], {d: [] for d in "abcd"}
        for _ in range(100):
            gt = car(rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-math.pi, math.pi))
            props = []
            for d in "abcd":
                for _tta in range(4):
                    noise = rng.normal(0, [0.15, 0.15, 0.05, 0.1, 0.05, 0.05, 0.03])
                    p = np.array(gt.params) + noise
                    b = Box7(*p, score=float(rng.uniform(0.5, 1.0)), detector_id=d)
                    props.append(b)
                    per_det[d].append(iou_3d(b, gt))
            out = kbf(props, CFG)
            assert len(out) == 1
            fused_iou.append(iou_3d(out[0], gt))
        assert np.mean(fused_iou) >= max(np.mean(v) for v in per_det.values())

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariant_and_traceable(self, seed):
        r = np.random.default_rng(seed)
        centres = r.uniform(-15, 15, (3, 2))
        boxes = [
            car(*(c + r.normal(0, 0.3, 2)), heading=float(r.uniform(-3, 3)), score=float(r.uniform(0.1, 1)), det=d)
            for c in centres
            for d in "abcdef"
        ]
        out = kbf(boxes, CFG)
        perm = [boxes[i] for i in r.permutation(len(boxes))]
        assert kbf(perm, CFG) == out
        for f in out:
            for name in ("cx", "cy", "cz", "l", "w", "h", "heading", "score"):
                assert getattr(f, name) in {getattr(b, name) for b in boxes}


class TestNms:
    def test_overlap(self):
        a, b = car(score=0.9), car(0.2, score=0.8)
        assert bev_iou(a, b) > 0.85
        assert nms([b, a], 0.1) == [a]

    def test_disjoint(self):
        assert len(nms([car(), car(10)], 0.1)) == 2

    def test_brute_force(self, rng):
        for _ in range(100):
            boxes = [random_box(rng, spread=4) for _ in range(10)]
            thr = float(rng.uniform(0, 0.6))
            kept = nms(boxes, thr)
            assert kept == brute_nms(boxes, thr)
            for x, y in itertools.combinations(kept, 2):
                assert bev_iou(x, y) <= thr


class TestWbf:
    def test_identical(self):
        b = car(1, 2, 0.4)
        assert wbf_corners([b, b]).params == pytest.approx(b.params, abs=1e-9)
        assert wbf_params([b, b]).params == pytest.approx(b.params, abs=1e-9)

    def test_corners_symmetric_cubes(self):
        cubes = [Box7(x, 0, 0, 1, 1, 1, 0, score=0.5) for x in (0, 2)]
        assert wbf_corners(cubes).params == pytest.approx((1, 0, 0, 1, 1, 1, 0), abs=1e-9)

    def test_weighted_centre(self):
        boxes = [car(0, score=0.9), car(2, score=0.1)]
        assert wbf_corners(boxes).cx == pytest.approx(0.2)
        assert wbf_params(boxes).cx == pytest.approx(0.2)

    def test_params_wraps_heading(self):
        fused = wbf_params([car(heading=-3.1), car(heading=3.1)])
        assert abs(fused.heading) == pytest.approx(math.pi, abs=1e-9)

    @pytest.mark.parametrize("method", ["kbf", "wbf-p", "wbf-c", "nms"])
    def test_same_clustering(self, method):
        boxes = [car(0, 0.1 * i) for i in range(6)] + [car(10, 0.1 * i) for i in range(3)]
        assert len(fuse(boxes, CFG, method)) == 1
