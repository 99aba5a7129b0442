"""Desk-scale multi-modal learning: per-modality transformer encoders, a
single shared trunk, masked pretraining, and task-grouped modality-mixed
fine-tuning, all on synthetic data."""

from .data import (DEFAULT_AXES, DEFAULT_PATCH, Modality, ModalitySample,
                   PatchSequence, PatchSpec, SyntheticDatasetSpec,
                   extract_patches, generate_dataset, load_dataset,
                   normalize_visual, save_dataset)
from .encoders import EncoderConfig, MetaToken, ModalityEncoder, make_meta_token
from .errors import (ConfigError, ContractError, CrossmodalError,
                     DimensionError, FormatError, NumericsError)
from .model import ModelConfig, Network
from .optim import SGD, Adam, make_optimizer
from .pretrain import (MaskPlan, MaskRatios, TextMaskAction, masked_forward,
                       permuted_lm_prepare, plan_mask, pretrain_epoch,
                       reconstruction_loss)
from .schedule import (AblationVariant, TaskRegistry, TaskSpec, TrainSchedule,
                       assemble_mixed_batch, build_group_sequence, evaluate,
                       finetune_run, run_ablation)
from .tensor import Tensor, backward
from .trunk import HeadConfig, TrunkConfig, head_forward, task_loss

__version__ = "0.1.0"
