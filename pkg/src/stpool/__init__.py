"""Spatio-temporal region pooling over superpixel video.

The package turns per-frame features plus superpixel maps and dense optical
flow into region features for one target frame: regions are matched across
frames by bidirectionally consistent flow warping, pooled spatially within
each frame, pooled temporally across the frames where a region was matched,
and broadcast back to target pixels. All three pooling stages expose analytic
backward passes, so a linear classification head can be trained end to end.
"""

from .config import parse_kv_file, parse_kv_text, substream
from .correspond import (
    CorrespondenceTable,
    MatchScore,
    SamplingPolicy,
    build_table,
    candidate_frames,
    compose_flow,
    correspondence_stats,
    iou,
    match_frame_pair,
    sample_frames,
    warp_region,
)
from .errors import (
    AllPixelsIgnoredError,
    ConfigError,
    DataFormatError,
    FrameRangeError,
    MissingFlowError,
    MissingRegionValueError,
    NonFiniteValueError,
    NoPresentFrameError,
    RegionIndexError,
    SceneSpecError,
    ShapeMismatchError,
    StpoolError,
    ValidationError,
)
from .evaluate import (
    ConfusionMatrix,
    Metrics,
    boundary_map,
    boundary_pr,
    metrics,
    oracle_label,
    oracle_propagate,
    oracle_region_classes,
    pixel_correspondence_baseline,
)
from .grid import (
    IGNORE,
    FeatureStack,
    FlowField,
    LabelMap,
    SuperpixelStack,
    region_pixel_sets,
    relabel_contiguous,
    validate_stack,
)
from .learn import (
    GradCheckReport,
    LinearHead,
    SgdState,
    TrainItem,
    cross_entropy,
    forward_item,
    grad_check,
    init_head,
    prepare_item,
    sgd_step,
    train,
)
from .pooling import (
    HeadState,
    RegionFeatureMap,
    RegionFeatureStack,
    pool_head_bwd,
    pool_head_fwd,
    region_to_pixel_bwd,
    region_to_pixel_fwd,
    spatial_pool_bwd,
    spatial_pool_fwd,
    temporal_pool_bwd,
    temporal_pool_fwd,
)
from .synth import (
    ObjectSpec,
    SceneBundle,
    SceneSpec,
    corrupt_flow,
    generate,
    load_scene_spec,
    read_bundle,
    truth_rows,
    write_bundle,
)
from .tensorio import read_index_map, read_tensor, write_index_map, write_tensor

__version__ = "0.1.0"
