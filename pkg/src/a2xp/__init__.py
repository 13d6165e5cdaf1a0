"""Attention-mixed expert prompts for domain generalization with a frozen classifier."""

from .adaptation import AdaptationResult, adapt_expert, build_expert_bank, pretrain_meta_prompt, train_prompt
from .config import ExperimentConfig, load_config
from .data import DomainDataset, LodoSplit, load_folder_dataset, lodo_splits, synthetic_shapes_domains
from .errors import (A2XPError, CacheInvalid, ConfigurationError, DatasetError, DegenerateExpert,
                     InconsistentClasses, NumericalFailure)
from .evaluation import attention_report, evaluate_accuracy, memory_report, source_eval_matrix
from .generalization import ScheduleConfig, make_lr_schedule, train_generalization
from .mixer import MixerConfig, MixerHeads, attention_weights, embed_experts, embed_image, forward
from .objective import LossConfig, ObjectiveNetwork, loss
from .prompts import ExpertBank, InitStrategy, PaddingPrompt, border_mask, init_prompt, normalize_expert
from .stats import rm_anova

__version__ = "0.1.0"
