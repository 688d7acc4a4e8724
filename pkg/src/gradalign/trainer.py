"""SGD loop over the prompt (or a cosine classifier) with per-step surgery.

Plain SGD, no momentum: the update equation stays simple enough to check
against single-step oracles. The first epoch runs at a fixed warm-up rate,
afterwards the rate follows cosine annealing down to zero on the last step.
Every step's losses, gradient alignment and branch are recorded.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .datagen import Episode
from .errors import ConfigError, NumericalError, ParameterError
from .losses import Batch, classifier_grads, classifier_predictions, grad_l2reg, prompt_grads, prompt_predictions
from .metrics import harmonic_mean
from .numerics import RngStream
from .surgery import Branch, RuleTag, UpdateRule, apply_rule
from .vlm import CosineClassifier, FrozenVLM, PromptState, init_prompt

__all__ = [
    "Target",
    "TrainConfig",
    "StepRecord",
    "FinalMetrics",
    "RunRecord",
    "lr_schedule",
    "train",
    "evaluate",
    "predictions",
]

# Update directions beyond this norm mean the run has diverged; abort loudly
# instead of letting NaNs propagate into the records.
ABORT_DIRECTION_NORM = 1e6


class Target(str, enum.Enum):
    PROMPT = "PROMPT"
    COSINE_CLASSIFIER = "COSINE_CLASSIFIER"


@dataclass(frozen=True)
class TrainConfig:
    rule: UpdateRule
    epochs: int
    seed: int
    lr0: float = 0.002
    warmup_lr: float = 1e-5
    batch_size: int = 32
    target: Target = Target.PROMPT

    def __post_init__(self):
        # zero is allowed so "no update" runs stay expressible in tests
        if self.lr0 < 0.0 or self.warmup_lr < 0.0:
            raise ParameterError("learning rates must be >= 0")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.rule.tag == RuleTag.L2REG and self.target != Target.PROMPT:
            raise ConfigError("the L2 prompt anchor is only defined for prompt training")


@dataclass
class StepRecord:
    step: int
    lr: float
    loss_ce: float
    loss_kl: float
    dot_ce_kl: float
    angle_deg: float
    branch: str


@dataclass
class FinalMetrics:
    acc_overall: float
    acc_base: float
    acc_new: float
    harmonic_mean: float
    acc_zero_shot: float


@dataclass
class RunRecord:
    """Per-step trace plus final test metrics; serializes as run_record.v1."""

    steps: list[StepRecord] = field(default_factory=list)
    final: FinalMetrics = None

    def to_json(self) -> str:
        doc = {
            "schema": "run_record.v1",
            "steps": [
                {
                    "step": s.step,
                    "lr": s.lr,
                    "loss_ce": s.loss_ce,
                    "loss_kl": s.loss_kl,
                    "dot_ce_kl": s.dot_ce_kl,
                    "angle_deg": s.angle_deg,
                    "branch": s.branch,
                }
                for s in self.steps
            ],
            "final": {
                "acc_overall": self.final.acc_overall,
                "acc_base": self.final.acc_base,
                "acc_new": self.final.acc_new,
                "harmonic_mean": self.final.harmonic_mean,
                "acc_zero_shot": self.final.acc_zero_shot,
            },
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        doc = json.loads(text)
        if doc.get("schema") != "run_record.v1":
            raise ConfigError(f"unsupported run record schema: {doc.get('schema')!r}")
        steps = [StepRecord(**s) for s in doc["steps"]]
        return cls(steps=steps, final=FinalMetrics(**doc["final"]))


def lr_schedule(cfg: TrainConfig, step: int, total_steps: int, steps_per_epoch: int) -> float:
    """Warm-up epoch at a fixed rate, then cosine annealing to zero.

    Post-warmup steps are counted 1-based (t = 1..T with T the number of
    post-warmup steps), so the final step lands exactly on lr = 0.
    """
    if not 0 <= step < total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps})")
    if step < steps_per_epoch:
        return cfg.warmup_lr
    t = step - steps_per_epoch + 1
    total = total_steps - steps_per_epoch
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


Params = Union[PromptState, CosineClassifier]


def predictions(vlm: FrozenVLM, params: Params, features: np.ndarray) -> np.ndarray:
    """Predicted class indices (argmax, ties to the lowest index)."""
    if isinstance(params, PromptState):
        probs = prompt_predictions(vlm, params, features)
    else:
        probs = classifier_predictions(vlm, params, features)
    return probs.argmax(axis=1)


def evaluate(vlm: FrozenVLM, params: Params, batch: Batch) -> float:
    """Fraction of test items whose argmax prediction matches the label."""
    pred = predictions(vlm, params, batch.features)
    return float((pred == batch.labels).mean())


def _final_metrics(vlm: FrozenVLM, params: Params, episode: Episode) -> FinalMetrics:
    test = episode.test
    pred = predictions(vlm, params, test.features)
    correct = pred == test.labels
    base_mask = np.isin(test.labels, sorted(episode.base_classes))
    new_mask = np.isin(test.labels, sorted(episode.new_classes))
    acc_base = float(correct[base_mask].mean()) if base_mask.any() else 0.0
    acc_new = float(correct[new_mask].mean()) if new_mask.any() else 0.0
    zs_pred = predictions(vlm, init_prompt(vlm), test.features)
    return FinalMetrics(
        acc_overall=float(correct.mean()),
        acc_base=acc_base,
        acc_new=acc_new,
        harmonic_mean=harmonic_mean(acc_base, acc_new),
        acc_zero_shot=float((zs_pred == test.labels).mean()),
    )


def train(vlm: FrozenVLM, episode: Episode, cfg: TrainConfig) -> tuple[Params, RunRecord]:
    """Run the full schedule on one episode; returns trained params and trace.

    Deterministic: (vlm, episode, cfg) fixes every recorded number. Minibatches
    are drawn without replacement per epoch with a seeded shuffle; the batch
    size clamps to the train-set size.
    """
    if len(episode.train) == 0:
        raise ConfigError("episode has an empty train split")
    n = len(episode.train)
    batch = min(cfg.batch_size, n)
    steps_per_epoch = -(-n // batch)
    total_steps = cfg.epochs * steps_per_epoch

    if cfg.target == Target.PROMPT:
        params: Params = init_prompt(vlm)
    else:
        params = CosineClassifier.create(RngStream(cfg.seed).child("classifier-init").seed, vlm.k, vlm.feat_dim)
    prompt_zs = init_prompt(vlm)
    order_rng = RngStream(cfg.seed).child("batch-order")

    record = RunRecord()
    step = 0
    for _ in range(cfg.epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            mb = Batch(episode.train.features[idx], episode.train.labels[idx])
            if cfg.target == Target.PROMPT:
                lg = prompt_grads(vlm, params, mb)
            else:
                lg = classifier_grads(vlm, params, mb)
            g_reg = None
            if cfg.rule.tag == RuleTag.L2REG:
                g_reg = grad_l2reg(params, prompt_zs, cfg.rule.alpha)
            outcome = apply_rule(cfg.rule, lg.pair(), g_reg, step)
            norm = float(np.sqrt(np.dot(outcome.direction, outcome.direction)))
            if norm > ABORT_DIRECTION_NORM:
                raise NumericalError(f"diverged at step {step}: direction norm {norm:.3e}")
            lr = lr_schedule(cfg, step, total_steps, steps_per_epoch)
            if cfg.target == Target.PROMPT:
                params = PromptState(params.v - lr * outcome.direction.reshape(vlm.m, vlm.tok_dim))
            else:
                params = CosineClassifier(
                    params.weights - lr * outcome.direction.reshape(vlm.k, vlm.feat_dim)
                )
            record.steps.append(
                StepRecord(
                    step=step,
                    lr=lr,
                    loss_ce=lg.loss_ce,
                    loss_kl=lg.loss_kl,
                    dot_ce_kl=outcome.dot_ce_kl,
                    angle_deg=outcome.angle_deg,
                    branch=outcome.branch.value,
                )
            )
            step += 1
    record.final = _final_metrics(vlm, params, episode)
    return params, record
