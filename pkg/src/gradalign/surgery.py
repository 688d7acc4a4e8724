"""Gradient surgery: turn a (task, teacher) gradient pair into an update direction.

The core rule keeps the task gradient whenever it does not conflict with the
teacher-KL gradient, and otherwise removes (a lambda fraction of) its
component along the teacher direction. Baseline rules: plain task gradient,
summed distillation gradient, alternating two-sided projection, and task
gradient plus an L2 prompt-anchor term.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionMismatch, NumericalError, ParameterError
from .losses import GradPair
from .numerics import angle_deg, as_vector

__all__ = [
    "DEGENERATE_NORM",
    "Branch",
    "RuleTag",
    "UpdateRule",
    "SurgeryOutcome",
    "prograd",
    "kd_grad",
    "gm_grad",
    "apply_rule",
]

# Below this norm the teacher gradient carries no direction information and
# the projection denominator is meaningless.
DEGENERATE_NORM = 1e-12


class Branch(str, enum.Enum):
    ALIGNED = "ALIGNED"
    CONFLICT = "CONFLICT"
    PASSTHROUGH = "PASSTHROUGH"


class RuleTag(str, enum.Enum):
    CE = "CE"
    PROGRAD = "PROGRAD"
    KD = "KD"
    GM = "GM"
    L2REG = "L2REG"


@dataclass(frozen=True)
class UpdateRule:
    """Strategy selector: tag plus the hyper-parameter the tag uses."""

    tag: RuleTag
    lam: float = 0.0  # PROGRAD only
    alpha: float = 0.0  # L2REG only

    def __post_init__(self):
        if self.tag == RuleTag.PROGRAD and not (0.0 <= self.lam <= 1.0):
            raise ParameterError(f"lambda must be in [0, 1], got {self.lam}")
        if self.tag == RuleTag.L2REG and self.alpha < 0.0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")

    @classmethod
    def ce(cls) -> "UpdateRule":
        return cls(RuleTag.CE)

    @classmethod
    def prograd(cls, lam: float = 1.0) -> "UpdateRule":
        return cls(RuleTag.PROGRAD, lam=lam)

    @classmethod
    def kd(cls) -> "UpdateRule":
        return cls(RuleTag.KD)

    @classmethod
    def gm(cls) -> "UpdateRule":
        return cls(RuleTag.GM)

    @classmethod
    def l2reg(cls, alpha: float = 0.01) -> "UpdateRule":
        return cls(RuleTag.L2REG, alpha=alpha)

    def label(self) -> str:
        return self.tag.value


@dataclass
class SurgeryOutcome:
    """Chosen update direction plus the alignment trace of the input pair."""

    direction: np.ndarray
    branch: Branch
    dot_ce_kl: float
    angle_deg: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.direction)):
            raise NumericalError("surgery produced a non-finite direction")


def _classify(dotv: float, norm_kl: float) -> Branch:
    if dotv >= 0.0:
        return Branch.ALIGNED
    if norm_kl < DEGENERATE_NORM:
        return Branch.PASSTHROUGH
    return Branch.CONFLICT


def _trace_angle(g_ce: np.ndarray, g_kl: np.ndarray) -> float:
    """Angle for the step trace; degenerate pairs record a neutral 90 degrees."""
    if float(np.dot(g_ce, g_ce)) == 0.0 or float(np.dot(g_kl, g_kl)) == 0.0:
        return 90.0
    return angle_deg(g_ce, g_kl)


def prograd(g_ce, g_kl, lam: float) -> SurgeryOutcome:
    """Drop (lam times) the task gradient's component along a conflicting
    teacher gradient; keep it untouched when the two already agree."""
    vce, vkl = as_vector(g_ce, "g_ce"), as_vector(g_kl, "g_kl")
    if vce.shape != vkl.shape:
        raise DimensionMismatch("gradient lengths differ")
    if not (0.0 <= lam <= 1.0):
        raise ParameterError(f"lambda must be in [0, 1], got {lam}")
    dotv = float(np.dot(vce, vkl))
    nkl2 = float(np.dot(vkl, vkl))
    branch = _classify(dotv, math.sqrt(nkl2))
    if branch == Branch.CONFLICT and lam != 0.0:
        direction = vce - (lam * dotv / nkl2) * vkl
    else:
        direction = vce.copy()
    return SurgeryOutcome(direction, branch, dotv, _trace_angle(vce, vkl))


def kd_grad(g: GradPair) -> np.ndarray:
    """Summed-distillation direction: gradient of (task loss + teacher KL)."""
    return g.g_ce + g.g_kl


def gm_grad(g: GradPair, step_index: int) -> np.ndarray:
    """Alternating two-sided projection.

    Even steps follow the task gradient, odd steps the teacher gradient; on
    conflict the active gradient is fully projected off the other one.
    """
    if step_index % 2 == 0:
        source, other = g.g_ce, g.g_kl
    else:
        source, other = g.g_kl, g.g_ce
    dotv = float(np.dot(source, other))
    nother2 = float(np.dot(other, other))
    if dotv >= 0.0 or math.sqrt(nother2) < DEGENERATE_NORM:
        return source.copy()
    return source - (dotv / nother2) * other


def apply_rule(
    rule: UpdateRule,
    g: GradPair,
    g_reg: Optional[np.ndarray] = None,
    step_index: int = 0,
) -> SurgeryOutcome:
    """Dispatch a gradient pair through the selected rule.

    Every outcome carries the task/teacher dot product and angle so step
    traces need no recomputation, whatever the rule.
    """
    if (g_reg is not None) != (rule.tag == RuleTag.L2REG):
        raise ConfigError("g_reg must be supplied exactly when the rule is L2REG")
    if rule.tag == RuleTag.PROGRAD:
        return prograd(g.g_ce, g.g_kl, rule.lam)
    dotv = float(np.dot(g.g_ce, g.g_kl))
    branch = _classify(dotv, float(np.sqrt(np.dot(g.g_kl, g.g_kl))))
    angle = _trace_angle(g.g_ce, g.g_kl)
    if rule.tag == RuleTag.CE:
        direction = g.g_ce.copy()
    elif rule.tag == RuleTag.KD:
        direction = kd_grad(g)
    elif rule.tag == RuleTag.GM:
        direction = gm_grad(g, step_index)
    else:  # L2REG
        reg = as_vector(g_reg, "g_reg")
        if reg.shape != g.g_ce.shape:
            raise DimensionMismatch("regularizer gradient length differs")
        direction = g.g_ce + reg
    return SurgeryOutcome(direction, branch, dotv, angle)
