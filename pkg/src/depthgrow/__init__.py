"""depthgrow: depth-curriculum training for image classifiers.

Backbones are declared as ordered sequences of atomic blocks, partitioned
into balanced contiguous stages, and trained by progressively growing the
active prefix - reusing trained weights at every step - with analytic
accounting of the compute saved relative to entire-model training.
"""

__version__ = "0.1.0"

from .accounting import (
    CostModel,
    cost_report,
    network_parameter_count,
    overall_computation,
    prefix_parameter_count,
    stage_cost,
)
from .backbones import (
    BackboneSpec,
    ConvStemSpec,
    OrderedBlockList,
    PatchTokenizerSpec,
    PrefixNetwork,
    backbone_preset,
    build_backbone,
    build_prefix,
    full_network,
    make_head,
    parameter_count,
    preset_names,
)
from .data import (
    AugmentPolicy,
    DatasetSplit,
    SynthFusionConfig,
    augment,
    batch_preparer,
    generate_synth_fusion,
    load_cifar10,
    load_image_folder,
    stratified_split,
    subsample_train,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DepthgrowError,
    TrainingDivergedError,
)
from .metrics import (
    MetricsReport,
    confusion_matrix,
    evaluate,
    metrics_from_confusion,
    metrics_from_predictions,
)
from .partition import StagePlan, balanced_partition, make_plan
from .schedule import OptimizerConfig, ProgressiveSchedule
from .training import (
    RunReport,
    StageResult,
    comparison_rows,
    grow,
    load_network_from_checkpoint,
    render_comparison,
    run_curriculum,
    run_paired,
    run_stage,
    strip_volatile,
    train_entire,
)
