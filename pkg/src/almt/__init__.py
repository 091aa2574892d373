"""Adaptive language-guided multimodal transformer for sentiment regression, on numpy."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    FormatError,
    Sample,
    SynthConfig,
    ValidationError,
    generate_synthetic,
    inject_frame_noise,
    iterate_batches,
    read_mmf,
    split_dataset,
    write_mmf,
)
from .metrics import BucketSpec, MetricsReport, compute_report
from .model import (
    AblationFlags,
    ALMTModel,
    AttentionTrace,
    ConfigError,
    ModelConfig,
    apply_ablation,
    compute_loss,
    count_parameters,
    model_forward,
)
from .tensor import ContractError, DimensionError, NonFiniteError, Tensor, default_dtype, no_grad
from .train import ScheduleConfig, TrainConfig, adamw_step, evaluate, lr_at, train

__version__ = "0.1.0"
