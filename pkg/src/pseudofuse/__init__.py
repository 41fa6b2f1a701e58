"""Multi-detector 3D pseudo-label generation: KDE box fusion, tracking-based
static refinement and pseudo-label assembly."""

from .evalbench import EvalConfig, SynthConfig, evaluate_ap, generate_scene
from .fusion import FusionConfig, ProposalSet, TTA, kbf, nms
from .geometry import Box7, EgoPose, bev_iou, iou_3d, points_in_box, transform_box
from .io import PseudoLabel, PseudoLabelSet, load_pseudo_labels, save_pseudo_labels
from .pipeline import PipelineConfig, SequenceInput, load_config, load_sequence, run_pipeline

__version__ = "0.1.0"
