"""Quality-aware all-in-one image restoration with learned quality prompts."""

from .config import RunConfig, build_config, load_config
from .degrade import DatasetConfig, DegradationSpec, apply_degradation, make_dataset
from .errors import (
    ConfigError,
    ContractError,
    DependencyError,
    FrozenError,
    NumericDomainError,
    ParameterError,
    PipelineOrderError,
    QairError,
    TrainingError,
)
from .guidance import CFE, PGM, GuidedRestorer, extract_semantic
from .losses import DifficultyState, LossWeights, total_loss
from .metrics import psnr, ssim
from .perceiver import QualityPromptSet, classify_quality, init_prompts, train_prompts
from .restorer import RestorationBranch, RestorerConfig

__version__ = "0.1.0"
