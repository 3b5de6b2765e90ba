"""Pose-free test-time adaptation of a monocular depth network on streams.

The network is a small numpy U-Net with its own reverse-mode autodiff. During
adaptation only encoder batch-norm scales and shifts are updated, from two
self-supervised signals: median-filtered depth inside dynamic-object masks,
and agreement between image and depth Laplacian edge maps.
"""

from .adaptation import (
    EvalConfig,
    Hyperparams,
    SelectionSpec,
    StepReport,
    adapt_step,
    depth_refining_loss,
    edge_guided_loss,
    resolve_selection,
    run_stream,
    total_loss,
)
from .errors import (
    ConfigError,
    DepthTTAError,
    DimensionError,
    IngestionError,
    InputError,
    NumericError,
    ReportIOError,
    TrainingError,
)
from .estimators import DepthNetRegressor, TestTimeAdapter, check_depth_map, check_image
from .metrics import MetricRecord, aggregate, compute_metrics
from .net import DepthNet, DepthNetConfig, init_weights, pretrain_on_source
from .scene import DomainShift, Frame, SceneConfig, apply_domain_shift, generate_frame, generate_stream, load_frame_dir
from .segmentation import InstanceMaskSet, PanopticMask, extract_instance_masks, oracle_panoptic
from .signal import CameraIntrinsics, edge_map, mask_depth, median_filter, project

__version__ = "0.1.0"
