"""Compound-fault severity diagnosis on synthetic vibration data.

Multi-output classification heads, frequency-axis layer normalization, and a
partially-labeled domain-adaptation training protocol, all on a small
numpy-only stack with exact manual gradients.
"""

from .config import ExperimentConfig, default_config, load_config
from .evaluation import EvalReport, evaluate, macro_f1
from .features import FeatureDataset, StftConfig, batch_features, featurize, log_magnitude, stft
from .losses import MkMmdConfig, cce, entropy_min, mk_mmd, total_finetune_loss
from .model import (
    ArchConfig,
    ForwardOut,
    Model,
    ModelParams,
    joint_from_levels,
    levels_from_joint,
    load_checkpoint,
    save_checkpoint,
)
from .normalization import NormState, norm_stats, normalize_backward, normalize_forward
from .signals import (
    BearingGeometry,
    ConstantRpm,
    DomainDataset,
    FaultCondition,
    Signal,
    SinusoidalRpm,
    SynthConfig,
    TriangularRpm,
    bpfi,
    bpfo,
    load_dataset,
    make_domain_dataset,
    rpm_at,
    save_dataset,
    synthesize,
)
from .training import TrainConfig, adam_step, finetune_target, pretrain_source

__version__ = "0.1.0"
