"""Self-supervised scene flow and odometry on top-view multi-layer grid maps."""

from .exceptions import (
    EstimationError,
    FormatError,
    GridFlowError,
    NumericalError,
    ValidationError,
)
from .grid_map import (
    GridConfig,
    GridMap,
    GridMapper,
    PointCloud,
    build_grid_map,
    cast_shadows,
    gaussian_blur,
    rasterize,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    MaskSet,
    charbonnier,
    data_loss,
    loss_gradient,
    mask_regularizer,
    motion_loss,
    motion_residual,
    occlusion_mask,
    spatial_loss,
    spatial_residual,
    total_loss,
)
from .rigid_motion import (
    RigidTransform2D,
    WeightedCorrespondences,
    estimate_rigid,
    irls_estimate,
    motion_flow,
    motion_mask,
    spatial_mask,
)
from .warp import Direction, FlowField, bilinear_sample, sample_gradient, warp_backward

__version__ = "0.1.0"
