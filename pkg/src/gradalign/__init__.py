"""gradalign: teacher-aligned gradient surgery for prompt tuning, desk scale.

A frozen toy text encoder stands in for a large vision-language model; a
learnable prompt (or cosine classifier) is tuned on synthetic few-shot
episodes while a zero-shot teacher supplies a "general direction" that the
update rule may never conflict with.
"""

from .datagen import DomainSpec, Episode, sample_episode, shift_domain, split_base_new, teacher_aligned_prototypes
from .errors import (
    ConfigError,
    DegenerateInput,
    DimensionMismatch,
    GradalignError,
    InfiniteLoss,
    NumericalError,
    ParameterError,
)
from .losses import Batch, GradPair, ce_loss, grad_ce, grad_kl, grad_l2reg, grad_pair, kl_loss
from .metrics import failure_overlap, harmonic_mean
from .numerics import RngStream, angle_deg, cosine_sim, dot, finite_diff_grad, l2_norm, sample_gaussian, softmax
from .surgery import Branch, RuleTag, SurgeryOutcome, UpdateRule, apply_rule, gm_grad, kd_grad, prograd
from .trainer import RunRecord, Target, TrainConfig, evaluate, lr_schedule, train
from .vlm import (
    CosineClassifier,
    FrozenVLM,
    PromptState,
    class_features,
    cosine_classifier_probs,
    encode_text,
    init_prompt,
    predict_probs,
    zero_shot_probs,
)

__version__ = "0.1.0"
