"""densedet: person detection with dense surface-embedding pooling.

A numpy library covering the full desk-scale pipeline: box arithmetic and
anchor grids, region-proposal selection, ROI-Align with an exact adjoint,
mesh surface embeddings with an auditable correspondence loss, COCO-protocol
evaluation, dataset tooling, and a deterministic toy training harness.
"""

from .geometry import AnchorSpec, Box, BoxDelta, decode_box, encode_box, generate_anchors, iou
from .metrics import (
    ApSummary,
    Detection,
    GroundTruthBox,
    average_precision,
    best_threshold_accuracy,
    coco_summary,
    format_summary_csv,
    format_summary_row,
    format_summary_text,
    match_detections,
    roc_auc,
)
from .proposals import AnchorLabels, ScoredBox, assign_anchor_labels, nms, select_proposals
from .roi_align import FeatureMap, RoiFeatures, roi_align, roi_align_backward
from .surface_embedding import (
    CorrespondenceSample,
    EmbeddingMatrix,
    Mesh,
    PixelEmbeddingField,
    cse_loss,
    expected_geodesic_error,
    geodesic_distances,
    load_mesh,
    parse_mesh,
    save_mesh,
    unit_circle_mesh,
    vertex_posterior,
)
from .dataio import (
    CocoDataset,
    SubsetSpec,
    SyntheticScene,
    extract_person_subset,
    generate_synthetic_scene,
    load_scene,
    parse_coco,
    read_detections,
    save_scene,
    serialize_coco,
    write_detections,
)
from .trainkit import (
    RunReport,
    TinyBackbone,
    TrainConfig,
    compare_runs,
    grad_check,
    run_gradient_audit,
    smooth_l1,
    train_toy_detector,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorLabels",
    "AnchorSpec",
    "ApSummary",
    "Box",
    "BoxDelta",
    "CocoDataset",
    "CorrespondenceSample",
    "Detection",
    "EmbeddingMatrix",
    "FeatureMap",
    "GroundTruthBox",
    "Mesh",
    "PixelEmbeddingField",
    "RoiFeatures",
    "RunReport",
    "ScoredBox",
    "SubsetSpec",
    "SyntheticScene",
    "TinyBackbone",
    "TrainConfig",
    "assign_anchor_labels",
    "average_precision",
    "best_threshold_accuracy",
    "coco_summary",
    "compare_runs",
    "cse_loss",
    "decode_box",
    "encode_box",
    "expected_geodesic_error",
    "extract_person_subset",
    "format_summary_csv",
    "format_summary_row",
    "format_summary_text",
    "generate_anchors",
    "generate_synthetic_scene",
    "geodesic_distances",
    "grad_check",
    "iou",
    "load_mesh",
    "load_scene",
    "match_detections",
    "nms",
    "parse_coco",
    "parse_mesh",
    "read_detections",
    "roc_auc",
    "roi_align",
    "roi_align_backward",
    "run_gradient_audit",
    "save_mesh",
    "save_scene",
    "select_proposals",
    "serialize_coco",
    "smooth_l1",
    "train_toy_detector",
    "unit_circle_mesh",
    "vertex_posterior",
    "write_detections",
]
