"""Dynamic temporal feature aggregation on synthetic video feature streams."""

from .bench import BenchmarkReport, emit_report, oracle_mode, run_benchmark, sweep_policies
from .errors import (
    CheckpointError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    DynaggError,
    SpecError,
    TrainingError,
)
from .estimators import Estimators, TrainConfig, gradient_check, load_checkpoint, save_checkpoint, train
from .features import AggregationResult, PrototypeBank, aggregate, classify, cosine_weights
from .policy import (
    Box,
    MappingFn,
    PolicyConfig,
    SamplingStrategy,
    deformable_budget,
    motion_iou,
    sample_frames,
    size_score,
    speed_category_gt,
    vanilla_budget,
)
from .synthetic import ClipSpec, DatasetSpec, SyntheticClip, degrade, generate_clip, label_clip, make_dataset

__version__ = "0.1.0"
