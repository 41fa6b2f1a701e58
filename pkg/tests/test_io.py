import json

import numpy as np
import pytest

from conftest import random_box
from pseudofuse.fusion import TTA
from pseudofuse.geometry import EgoPose
from pseudofuse.io import (
    Detection,
    FormatError,
    PseudoLabel,
    PseudoLabelSet,
    load_detections,
    load_points,
    load_poses,
    load_pseudo_labels,
    save_detections,
    save_points,
    save_poses,
    save_pseudo_labels,
)
from pseudofuse.pipeline import PipelineConfig, load_config, load_sequence


def det_record(frame=0, width=1.9, **kw):
    rec = {
        "frame": frame, "detector": "a", "tta": {"flip_x": False, "flip_y": True, "rot": 0.25},
        "stream": "1f", "box": [1.0, 2.0, 0.5, 4.5, width, 1.6, 0.3], "score": 0.8, "class": 0,
    }
    rec.update(kw)
    return rec


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def write_poses(path, frames):
    return write_lines(path, [{"frame": f, "t": [0.5 * f, 0.0, 0.0], "q": [1, 0, 0, 0]} for f in frames])


def random_labels(rng, n):
    provs = ("fused-1f", "tracked-1f", "static-refined", "static-propagated")
    labels = []
    for i in range(n):
        p = provs[i % 4]
        labels.append(PseudoLabel(random_box(rng, frame_idx=i // 10, spread=50, detector_id=p), p))
    return PseudoLabelSet(tuple(labels), "abc123")


class TestPseudoLabels:
    def test_round_trip(self, tmp_path, rng):
        labels = random_labels(rng, 57)
        save_pseudo_labels(labels, tmp_path / "l.jsonl")
        assert load_pseudo_labels(tmp_path / "l.jsonl") == labels

    def test_empty_has_header(self, tmp_path):
        save_pseudo_labels(PseudoLabelSet((), "h"), tmp_path / "e.jsonl")
        lines = (tmp_path / "e.jsonl").read_text().splitlines()
        assert [json.loads(x) for x in lines] == [{"version": 1, "config_hash": "h"}]
        assert len(load_pseudo_labels(tmp_path / "e.jsonl")) == 0

    def test_line_count(self, tmp_path, rng):
        save_pseudo_labels(random_labels(rng, 1000), tmp_path / "k.jsonl")
        assert len((tmp_path / "k.jsonl").read_text().splitlines()) == 1001

    def test_missing_header(self, tmp_path):
        write_lines(tmp_path / "x.jsonl", [{"frame": 0, "box": [0] * 7, "score": 1, "class": 0, "provenance": "p"}])
        with pytest.raises(FormatError, match=":1:"):
            load_pseudo_labels(tmp_path / "x.jsonl")


class TestDetections:
    def test_round_trip(self, tmp_path, rng):
        dets = [
            Detection(random_box(rng, frame_idx=k // 3, detector_id="d%d" % (k % 2)), TTA(k % 2 == 0, False, 0.1 * k), "16f" if k % 3 else "1f")
            for k in range(30)
        ]
        save_detections(dets, tmp_path / "d.jsonl")
        assert load_detections(tmp_path / "d.jsonl") == dets

    def test_negative_width_names_line(self, tmp_path):
        p = write_lines(tmp_path / "d.jsonl", [det_record(0), det_record(1), det_record(2, width=-1.0)])
        with pytest.raises(FormatError, match=r"d\.jsonl:3"):
            load_detections(p)

    @pytest.mark.parametrize(
        "bad",
        [
            {"stream": "8f"},
            {"box": [1, 2, 3]},
            {"score": "high"},
            {"detector": 3},
            {"class": 1.5},
        ],
    )
    def test_schema_errors(self, tmp_path, bad):
        p = write_lines(tmp_path / "d.jsonl", [det_record(0), det_record(0, **bad)])
        with pytest.raises(FormatError, match=":2:"):
            load_detections(p)

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps(det_record()) + "\n{not json\n")
        with pytest.raises(FormatError, match=":2:"):
            load_detections(p)

    def test_negative_frame(self, tmp_path):
        p = write_lines(tmp_path / "d.jsonl", [det_record(-1)])
        with pytest.raises(FormatError, match=":1:"):
            load_detections(p)

    def test_frames_non_decreasing(self, tmp_path):
        p = write_lines(tmp_path / "d.jsonl", [det_record(3), det_record(2)])
        with pytest.raises(FormatError, match="non-decreasing"):
            load_detections(p)

    def test_glob(self, tmp_path):
        write_lines(tmp_path / "a.jsonl", [det_record(0)])
        write_lines(tmp_path / "b.jsonl", [det_record(1, detector="b")])
        dets = load_detections(str(tmp_path / "*.jsonl"))
        assert [d.box.detector_id for d in dets] == ["a", "b"]
        with pytest.raises(FileNotFoundError):
            load_detections(str(tmp_path / "none*.jsonl"))


class TestPoses:
    def test_round_trip(self, tmp_path, rng):
        poses = {}
        for f in range(10):
            q = rng.normal(size=4)
            poses[f] = EgoPose(tuple(rng.normal(0, 50, 3)), tuple(q / np.linalg.norm(q)), f)
        save_poses(poses, tmp_path / "p.jsonl")
        loaded = load_poses(tmp_path / "p.jsonl")
        assert loaded.keys() == poses.keys()
        for f in poses:
            assert loaded[f].translation == poses[f].translation
            assert loaded[f].quaternion == poses[f].quaternion
            assert np.array_equal(loaded[f].rotation, poses[f].rotation)

    def test_strictly_increasing(self, tmp_path):
        p = write_poses(tmp_path / "p.jsonl", [0, 1, 1])
        with pytest.raises(FormatError, match=":3:"):
            load_poses(p)

    def test_non_unit_quaternion(self, tmp_path):
        p = write_lines(tmp_path / "p.jsonl", [{"frame": 0, "t": [0, 0, 0], "q": [2, 0, 0, 0]}])
        with pytest.raises(FormatError, match=":1:"):
            load_poses(p)


class TestPoints:
    def test_round_trip(self, tmp_path, rng):
        pts = {0: rng.normal(size=(100, 3)).astype(np.float32), 3: np.zeros((0, 3), np.float32), 4: rng.normal(size=(5, 3))}
        save_points(pts, tmp_path / "pts.bin")
        loaded = load_points(tmp_path / "pts.bin")
        assert sorted(loaded) == [0, 3, 4]
        for f in pts:
            assert np.array_equal(loaded[f], np.asarray(pts[f], np.float32).astype(float))

    def test_layout(self, tmp_path):
        save_points({7: np.array([[1.0, 2.0, 3.0]])}, tmp_path / "pts.bin")
        raw = (tmp_path / "pts.bin").read_bytes()
        assert raw == np.array([1, 7], "<u4").tobytes() + np.array([1, 2, 3], "<f4").tobytes()

    def test_truncated(self, tmp_path):
        save_points({0: np.ones((4, 3))}, tmp_path / "pts.bin")
        (tmp_path / "t.bin").write_bytes((tmp_path / "pts.bin").read_bytes()[:-4])
        with pytest.raises(FormatError):
            load_points(tmp_path / "t.bin")


class TestSequence:
    def test_three_frames(self, tmp_path):
        d = write_lines(tmp_path / "d.jsonl", [det_record(0), det_record(1), det_record(2, stream="16f")])
        p = write_poses(tmp_path / "p.jsonl", [0, 1, 2])
        seq = load_sequence([str(d)], p)
        assert seq.frame_indices == [0, 1, 2]
        assert [len(f.detections) for f in seq.frames] == [1, 1, 1]
        assert not seq.has_points

    def test_missing_pose(self, tmp_path):
        d = write_lines(tmp_path / "d.jsonl", [det_record(7)])
        p = write_poses(tmp_path / "p.jsonl", range(6))
        with pytest.raises(FormatError, match="frame 7"):
            load_sequence(str(d), p)


class TestConfig:
    def test_toml(self, tmp_path):
        (tmp_path / "c.toml").write_text(
            "final_score_threshold = 0.5\nuse_16f = false\n"
            "[bandwidths]\ncenter = 0.8\n"
            "[fusion]\nmin_cluster_size = 5\n"
            "[static]\nwindow = 4\n"
            "[tracker_1f]\nmetric = 'distance'\n"
        )
        cfg = load_config(tmp_path / "c.toml")
        assert cfg.final_score_threshold == 0.5 and not cfg.use_16f
        assert cfg.fusion.min_cluster_size == 5 and cfg.fusion.bandwidths.center == 0.8
        assert cfg.static.window == 4 and cfg.static.bandwidths.center == 0.8
        assert cfg.tracker_1f.metric == "distance" and cfg.tracker_16f.metric == "iou"

    def test_defaults_and_digest(self):
        a, b = PipelineConfig(), PipelineConfig.from_dict({})
        assert a == b and a.digest() == b.digest() and len(a.digest()) == 16
        assert PipelineConfig(final_score_threshold=0.5).digest() != a.digest()

    def test_shipped_default_config(self):
        from pathlib import Path

        path = Path(__file__).resolve().parents[1] / "configs" / "default.toml"
        assert load_config(path) == PipelineConfig()

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            PipelineConfig.from_dict({"final_threshold": 0.2})
