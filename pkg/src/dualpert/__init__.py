"""Salience-aware dual-perturbation attacks and defenses on synthetic
image-classification tasks, with a reproducible evaluation harness."""

from .attack import (
    AttackConfig,
    dual_attack,
    dual_step,
    init_dual,
    jsma_attack,
    pgd_attack,
    project,
    rs_dual_attack,
    steepest_dir,
)
from .data import Dataset, SynthConfig, gen_synthetic, load_dataset, load_tensor, save_dataset, save_tensor, split
from .defense import (
    ABSTAIN,
    SmoothedClassifier,
    TrainConfig,
    adv_train,
    clean_train,
    rs_predict,
    rs_train,
)
from .model import (
    Architecture,
    ClassifierParams,
    OptimizerState,
    adam_step,
    init_model,
    init_optimizer,
    load_params,
    predict_class,
    predict_logits,
    save_params,
)
from .salience import (
    MaskPair,
    SalienceMap,
    fixation_masks,
    foreground_score,
    masks_from_segmentation,
    salience_map,
)
from .tensor import GradientSet, Tape, Tensor, backward

__version__ = "0.1.0"
