"""Compare box fusion strategies on a synthetic sequence.

Each detector alone is noisy. KDE box fusion (kbf) picks per-parameter modes
across detectors and test-time augmentations; the baselines average or keep
the top box.
"""

from pseudofuse.evalbench import EvalConfig, SynthConfig, evaluate_ap, generate_scene, source_predictions
from pseudofuse.pipeline import PipelineConfig, fuse_sequence

scene = generate_scene(SynthConfig(n_frames=60, seed=0, with_points=False))
ec = EvalConfig(iou_thresholds=(0.7,), modes=("3d",), range_bins=())
key = (0.7, "3d", "all")

for det in scene.config.detectors:
    print(f"{det.name:10s} {evaluate_ap(source_predictions(scene.sequence, det.name), scene.ground_truth, ec)[key]:.3f}")
for method in ("kbf", "wbf-p", "wbf-c", "nms"):
    fused, _ = fuse_sequence(scene.sequence, PipelineConfig(fusion_method=method, use_16f=False))
    print(f"{method:10s} {evaluate_ap(fused, scene.ground_truth, ec)[key]:.3f}")
