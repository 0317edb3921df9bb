"""Disruptive autoencoder pre-training for 3D volumes, on a small numpy autodiff core."""

from .disruption import (DisruptionConfig, MaskPlan, add_noise, apply_local_mask, disrupt,
                         down_up, make_mask_plan)
from .losses import cmcl_loss, dice_loss, label_matrix, pretrain_loss, similarity
from .model import DaeModel, ModelConfig, TokenGrid, forward
from .tensor import Tensor, backward
from .trainer import TrainConfig, finetune, pretrain
from .volume import (Manifest, ModalityTag, Volume, load_volume, save_volume, synth_corpus,
                     synth_volume)

__version__ = "0.1.0"
