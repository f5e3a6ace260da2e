"""Compact landmark maps for visual localization.

The pipeline: import a multi-view reconstruction, compress it into a small
set of 3D landmarks (stable-point filtering, ground-plane clustering,
per-point descriptor selection, one virtual reference frame per landmark,
redundancy pruning), recognize landmarks on query keypoints, then recover
the camera pose landmark by landmark with EPnP + RANSAC and non-linear
refinement.
"""

from .errors import (
    BadMagic,
    ChecksumMismatch,
    DegenerateConfiguration,
    DescriptorDimMismatch,
    InvariantViolation,
    LandmarkLocError,
    LengthMismatch,
    LinkageError,
    MinimalSampleUnavailable,
    NoConsensus,
    ParseError,
    ShapeMismatch,
    TooFewPoints,
    UnsupportedVersion,
)
from .geometry import (
    CameraIntrinsics,
    Correspondence2D3D,
    Pose,
    RansacParams,
    RansacResult,
    RefineParams,
    epnp,
    project,
    project_points,
    ransac_pnp,
    refine_pose,
    unproject,
)
from .mapmodel import (
    Frame,
    Keypoint2D,
    Landmark,
    Point3D,
    Reconstruction,
    ReconstructionPoint,
    SceneMap,
    VirtualReferenceFrame,
)
from .mapio import (
    deserialize_map,
    load_map,
    load_reconstruction,
    save_map,
    save_reconstruction,
    serialize_map,
)
from .builder import (
    BuilderConfig,
    PruneResult,
    TrainingSample,
    assign_training_labels,
    build_map,
    filter_points,
    project_to_ground,
    prune_landmark_points,
    select_descriptor,
    select_vrf,
)
from .clustering import cluster_landmarks
from .recognition import (
    CentroidRecognizer,
    RecognitionOutput,
    TransformerConfig,
    TransformerRecognizer,
    deserialize_weights,
    linear_head_gradient,
    load_weights,
    positional_encode,
    recognize,
    save_weights,
    serialize_weights,
    tokenize,
    train_centroid_recognizer,
    transformer_forward,
    weighted_ce_loss,
)
from .localizer import (
    LocalizationResult,
    LocalizerParams,
    covis_refine,
    match_landmark,
    progressive_localize,
    rank_landmarks,
    remove_outliers,
)
from .synth import (
    QueryNoise,
    QueryRender,
    SceneGroundTruth,
    SceneSpec,
    generate_scene,
    render_query,
    sample_query_poses,
)
from .evaluation import EvalReport, evaluate, map_stats, pose_errors

__version__ = "0.1.0"
