"""Multi-atlas 2D image segmentation toolkit.

Pipelines: a dense displacement field is optimized per atlas-target pair
under a composite loss (image cross-correlation, optional label overlap,
field smoothness), warped atlas labels are fused with overlap-derived
weights, and stacked results are scored with 3D metrics.
"""

from .atlas import (
    AtlasEntry,
    AtlasSet,
    extract_features,
    feature_distance,
    feature_stats,
    select_atlases,
)
from .errors import (
    AllZeroOverlap,
    AtlasegError,
    ConstantImage,
    DegenerateTarget,
    DimensionMismatch,
    EmptyMask,
    EmptyReference,
    InvalidParams,
    LengthMismatch,
    NonFiniteLoss,
    NOutOfRange,
    OasgFormatError,
    TooFewSlices,
)
from .fusion import (
    FusionWeights,
    LOAMatrix,
    RegistrationCache,
    SegmentResult,
    Strategy,
    atlas_weights_from_loa,
    compute_loa_matrix,
    fuse_labels,
    fwal_weights,
    fwow_weights,
    segment,
    segment_detailed,
    test_time_weights,
)
from .grid import (
    DisplacementField,
    Image2D,
    LabelMap2D,
    Volume,
    normalize,
    resize,
    resize_label,
    threshold,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    dice_loss,
    ncc_loss,
    smoothness_loss,
    total_loss,
    total_loss_gradient,
)
from .metrics import (
    MetricRecord,
    arvd,
    dsc3d,
    evaluate_case,
    hausdorff,
    partition_regions,
)
from .phantom import Cohort, PhantomCase, PhantomParams, generate_case, generate_cohort
from .registration import (
    RegistrationConfig,
    RegistrationResult,
    register_pair,
    register_to_test,
)
from .transform import WarpResult, sample_gradient, warp

__version__ = "0.1.0"
