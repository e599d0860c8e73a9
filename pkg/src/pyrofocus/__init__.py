"""Hierarchical progressive-focus losses and a multi-level training simulator."""

from .losses import (
    PROB_FLOOR,
    DomainError,
    FocusParams,
    HardLabel,
    LossKind,
    Quality,
    Sample,
    focal_loss,
    hpf_loss,
    loss_grad_logit,
    loss_grads,
    loss_values,
    pf_qfl,
    pf_vfl,
)
from .scheduler import (
    ConfigError,
    FocusConfig,
    SamplingMode,
    ScheduleSnapshot,
    alpha_from_gamma,
    clamp_gamma,
    gamma_raw,
    resolve_focus,
)
from .levels import (
    LevelBatch,
    LevelLossReport,
    SampleSet,
    level_loss,
    split_by_level,
    total_cls_grad,
    total_cls_loss,
)
from .sim import (
    DivergenceError,
    OptimConfig,
    StreamConfig,
    ToyModel,
    TrainingTrace,
    drift_curve,
    generate_iteration,
    hard_easy_split,
    train,
)

__version__ = "0.1.0"
