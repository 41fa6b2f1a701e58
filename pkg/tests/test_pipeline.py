import dataclasses
import itertools
import logging

import numpy as np
import pytest

from pseudofuse.evalbench import SynthConfig, generate_scene, source_predictions
from pseudofuse.fusion import TTA
from pseudofuse.geometry import Box7, EgoPose, bev_iou, iou_3d
from pseudofuse.io import Detection
from pseudofuse.pipeline import (
    FrameInput,
    PipelineConfig,
    SequenceInput,
    assemble_frame,
    build_sequence,
    run_pipeline,
)

CFG = PipelineConfig()


def car(x=10.0, y=5.0, frame=0, score=0.9, det="a"):
    return Box7(x, y, 0.8, 4.5, 1.9, 1.6, 0.0, score=score, frame_idx=frame, detector_id=det)


def parked_car_sequence(n_frames, seen, score=0.9, ego_step=0.0):
    """One parked car at world (10, 5), seen by four detectors in both streams."""
    poses = {k: EgoPose.from_yaw(0.0, (ego_step * k, 0.0, 0.0), k) for k in range(n_frames)}
    dets = []
    for k in seen:
        for d, stream in itertools.product("abcd", ("1f", "16f")):
            dets.append(Detection(car(10.0 - ego_step * k, 5.0, k, score, d), TTA(), stream))
    return build_sequence(dets, poses)


@pytest.fixture(scope="module")
def small_scene():
    return generate_scene(SynthConfig(n_frames=40, n_static_vehicles=5, n_dynamic_vehicles=3, seed=3))


class TestAssembleFrame:
    def test_empty(self):
        assert assemble_frame([], [], [], None, CFG) == []

    def test_confident_single_frame_replaces_static(self):
        fused = car(score=0.95, det="fused-1f")
        static = car(10.5, score=0.75, det="static-refined")
        assert bev_iou(fused, static) == pytest.approx(0.8, abs=0.01)
        assert assemble_frame([fused], [], [static], None, CFG) == [fused]

    def test_equal_scores_resolved_by_source(self):
        fused = car(det="fused-1f")
        tracked = car(10.0 - 1e-12, det="tracked-1f")
        static = car(10.0 - 2e-12, det="static-refined")
        assert assemble_frame([fused], [tracked], [static], None, CFG) == [fused]
        assert assemble_frame([], [tracked], [static], None, CFG) == [tracked]

    def test_empty_space_removed(self):
        b = car(det="fused-1f")
        pts = np.array([[10.0, 5.0, 0.8], [50.0, 50.0, 0.0]])
        assert assemble_frame([b], [], [], pts, CFG) == [b]
        assert assemble_frame([b], [], [], pts[1:], CFG) == []

    def test_score_threshold_inclusive(self):
        assert len(assemble_frame([car(score=0.6)], [], [], None, CFG)) == 1
        assert assemble_frame([car(score=0.59)], [], [], None, CFG) == []


class TestRunPipeline:
    def test_zero_detections(self):
        seq = build_sequence([], {k: EgoPose.from_yaw(0.0, (k, 0, 0), k) for k in range(5)})
        assert len(run_pipeline(seq, CFG)) == 0

    def test_propagation_into_unseen_frames(self):
        seq = parked_car_sequence(60, range(20, 50), ego_step=0.3)
        cfg = dataclasses.replace(CFG, final_score_threshold=0.0)
        out = run_pipeline(seq, cfg).by_frame()
        assert sorted(out) == list(range(60))
        # refined, fused and tracked boxes coincide at frame 20; one survives NMS
        (lab20,) = out[20]
        s20 = lab20.box.score
        for f in range(20):
            (lab,) = out[f]
            assert lab.provenance == "static-propagated"
            assert lab.box.score == pytest.approx(s20 * 0.95 ** (20 - f), abs=1e-12)
            world = lab.box.cx + 0.3 * f
            assert (world, lab.box.cy) == pytest.approx((10.0, 5.0), abs=1e-9)
        assert s20 == pytest.approx(0.9)

    def test_default_threshold_cuts_long_propagation(self):
        out = run_pipeline(parked_car_sequence(60, range(20, 50)), CFG).by_frame()
        # 0.9 * 0.95**m >= 0.6 holds for m <= 7
        assert sorted(f for f in out if f < 20) == list(range(13, 20))

    def test_one_parked_car(self):
        cfg = SynthConfig(n_frames=50, n_static_vehicles=1, n_dynamic_vehicles=0, seed=14)
        cfg = dataclasses.replace(cfg, detectors=tuple(dataclasses.replace(d, fp_rate=0.0) for d in cfg.detectors))
        scene = generate_scene(cfg)
        # the car stays within 25 m of the ego vehicle throughout
        assert all(np.hypot(g[0].cx, g[0].cy) < 25 for g in scene.ground_truth.values())
        out = run_pipeline(scene.sequence, CFG).by_frame()
        fused_iou = []
        for f in range(50):
            assert len(out[f]) == 1
            (lab,) = out[f]
            assert lab.provenance in ("static-refined", "fused-1f")
            fused_iou.append(iou_3d(lab.box, scene.ground_truth[f][0]))
        singles = []
        for det in cfg.detectors:
            preds = source_predictions(scene.sequence, det.name)
            ious = [iou_3d(b, scene.ground_truth[f][0]) for f in range(50) for b in preds[f]]
            singles.append(np.mean(ious))
        assert np.mean(fused_iou) > max(singles)

    def test_one_frame_mode(self, small_scene):
        out = run_pipeline(small_scene.sequence, dataclasses.replace(CFG, use_16f=False))
        assert len(out) > 0
        assert {lab.provenance for lab in out.labels} <= {"fused-1f", "tracked-1f"}

    def test_output_invariants(self, small_scene):
        out = run_pipeline(small_scene.sequence, CFG)
        frames = set(small_scene.sequence.frame_indices)
        for f, labs in out.by_frame().items():
            assert f in frames
            for lab in labs:
                assert lab.box.score >= CFG.final_score_threshold
                assert lab.box.detector_id == lab.provenance
            for a, b in itertools.combinations(labs, 2):
                assert bev_iou(a.box, b.box) <= CFG.final_nms_iou
        assert {lab.provenance for lab in out.labels} <= {"fused-1f", "tracked-1f", "static-refined", "static-propagated"}
        assert out.config_hash == CFG.digest()

    def test_deterministic_and_parallel(self, small_scene):
        a = run_pipeline(small_scene.sequence, CFG)
        assert run_pipeline(small_scene.sequence, CFG) == a
        assert run_pipeline(small_scene.sequence, CFG, workers=2) == a

    def test_no_points_is_logged(self, caplog):
        seq = parked_car_sequence(3, range(3))
        with caplog.at_level(logging.INFO, logger="pseudofuse"):
            run_pipeline(seq, CFG)
        assert "point" in caplog.text

    def test_sequence_validation(self):
        pose = EgoPose((0, 0, 0))
        with pytest.raises(ValueError):
            SequenceInput((FrameInput(1, pose), FrameInput(0, pose)))
        with pytest.raises(ValueError):
            SequenceInput((FrameInput(0, None),))
