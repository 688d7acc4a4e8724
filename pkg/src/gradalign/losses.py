"""Cross-entropy and teacher-KL losses with hand-derived gradients.

There is no autodiff here: the encoder is small and fixed, so the chain rule
through softmax -> cosine -> normalize -> tanh -> affine is written out once
and checked against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, InfiniteLoss, NumericalError, ParameterError
from .numerics import as_vector, check_probs
from .vlm import CosineClassifier, EncodeCache, FrozenVLM, PromptState, init_prompt

__all__ = [
    "Batch",
    "GradPair",
    "LossGrads",
    "ce_loss",
    "kl_loss",
    "grad_ce",
    "grad_kl",
    "grad_pair",
    "grad_l2reg",
    "prompt_grads",
    "prompt_predictions",
    "classifier_grads",
    "classifier_predictions",
]


@dataclass
class Batch:
    """Feature/label pairs: features (n, feat_dim), labels (n,) class indices."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DimensionMismatch("batch needs 2-D features and 1-D labels")
        if len(self.features) == 0:
            raise DimensionMismatch("batch is empty")
        if len(self.features) != len(self.labels):
            raise DimensionMismatch("features and labels differ in length")
        if np.any(self.labels < 0):
            raise DimensionMismatch("labels must be non-negative class indices")
        if not np.all(np.isfinite(self.features)):
            raise NumericalError("batch features contain non-finite entries")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class GradPair:
    """Task gradient and teacher-KL gradient over the same flattened params."""

    g_ce: np.ndarray
    g_kl: np.ndarray

    def __post_init__(self):
        self.g_ce = as_vector(self.g_ce, "g_ce")
        self.g_kl = as_vector(self.g_kl, "g_kl")
        if self.g_ce.shape != self.g_kl.shape:
            raise DimensionMismatch("gradient pair lengths differ")


@dataclass
class LossGrads:
    """Gradient pair plus the batch-mean losses from the same forward pass."""

    g_ce: np.ndarray
    g_kl: np.ndarray
    loss_ce: float
    loss_kl: float

    def pair(self) -> GradPair:
        return GradPair(self.g_ce, self.g_kl)


def ce_loss(p, y: int) -> float:
    """Negative log-likelihood -log p[y] of the true class."""
    probs = check_probs(p)
    if not 0 <= y < probs.size:
        raise DimensionMismatch(f"label {y} out of range for {probs.size} classes")
    py = float(probs[y])
    if py == 0.0:
        raise InfiniteLoss(f"true-class probability is exactly zero (class {y})")
    return -math.log(py)


def kl_loss(p, p_zs) -> float:
    """KL(p_zs || p) = sum_i p_zs[i] log(p_zs[i]/p[i]), with 0 log 0 = 0.

    Gibbs' inequality puts the true value at >= 0; the rounding-level negative
    residue near p = p_zs is clamped away.
    """
    probs = check_probs(p)
    teacher = check_probs(p_zs)
    if probs.shape != teacher.shape:
        raise DimensionMismatch("distributions differ in length")
    mask = teacher > 0.0
    if np.any(probs[mask] == 0.0):
        raise InfiniteLoss("p has zero mass where the teacher has support")
    terms = teacher[mask] * (np.log(teacher[mask]) - np.log(probs[mask]))
    return max(float(terms.sum()), 0.0)


def _unit_rows(features: np.ndarray, name: str) -> np.ndarray:
    norms = np.sqrt((features**2).sum(axis=1))
    if np.any(norms == 0.0):
        raise DegenerateInput(f"{name} contains a zero feature vector")
    return features / norms[:, None]


def _row_softmax(logits: np.ndarray, tau: float) -> np.ndarray:
    z = logits / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _mean_ce(p: np.ndarray, labels: np.ndarray) -> float:
    py = p[np.arange(len(labels)), labels]
    if np.any(py == 0.0):
        raise InfiniteLoss("a true-class probability underflowed to zero")
    return float(-np.log(py).mean())


def _mean_kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = q > 0.0
    if np.any(p[mask] == 0.0):
        raise InfiniteLoss("student has zero mass where the teacher has support")
    terms = np.zeros_like(q)
    terms[mask] = q[mask] * (np.log(q[mask]) - np.log(p[mask]))
    rows = np.maximum(terms.sum(axis=1), 0.0)
    return float(rows.mean())


def _teacher_probs(vlm: FrozenVLM, xhat: np.ndarray) -> np.ndarray:
    tfeats = EncodeCache(vlm, init_prompt(vlm).v).feats
    return _row_softmax(xhat @ tfeats.T, vlm.tau)


def _prompt_backprop(vlm: FrozenVLM, cache: EncodeCache, g_feats: np.ndarray) -> np.ndarray:
    """Push a (k, feat_dim) cotangent on the class features back to flat v."""
    dots = (cache.feats * g_feats).sum(axis=1)
    g_u = (g_feats - dots[:, None] * cache.feats) / cache.norms[:, None]
    g_a = (1.0 - cache.u**2) * g_u
    g_z = g_a.sum(axis=0) @ vlm.enc_weights
    return g_z[: vlm.m * vlm.tok_dim]


def prompt_grads(vlm: FrozenVLM, prompt: PromptState, batch: Batch) -> LossGrads:
    """Batch-mean CE and teacher-KL gradients w.r.t. the flattened prompt."""
    if prompt.v.shape != (vlm.m, vlm.tok_dim):
        raise DimensionMismatch("prompt shape does not match the model")
    if batch.features.shape[1] != vlm.feat_dim:
        raise DimensionMismatch("batch feature width does not match the model")
    if int(batch.labels.max()) >= vlm.k:
        raise DimensionMismatch("batch label out of range for the model")
    n = len(batch)
    xhat = _unit_rows(batch.features, "batch")
    cache = EncodeCache(vlm, prompt.v)
    p = _row_softmax(xhat @ cache.feats.T, vlm.tau)
    q = _teacher_probs(vlm, xhat)

    onehot = np.zeros_like(p)
    onehot[np.arange(n), batch.labels] = 1.0
    dlog_ce = (p - onehot) / n
    dlog_kl = (p - q) / n
    g_ce = _prompt_backprop(vlm, cache, (dlog_ce.T @ xhat) / vlm.tau)
    g_kl = _prompt_backprop(vlm, cache, (dlog_kl.T @ xhat) / vlm.tau)
    return LossGrads(g_ce, g_kl, _mean_ce(p, batch.labels), _mean_kl(p, q))


def prompt_predictions(vlm: FrozenVLM, prompt: PromptState, features: np.ndarray) -> np.ndarray:
    """Row-wise class probabilities for a feature matrix under the prompt."""
    xhat = _unit_rows(np.ascontiguousarray(features, dtype=np.float64), "features")
    feats = EncodeCache(vlm, prompt.v).feats
    return _row_softmax(xhat @ feats.T, vlm.tau)


def classifier_grads(vlm: FrozenVLM, cls: CosineClassifier, batch: Batch) -> LossGrads:
    """Batch-mean CE and teacher-KL gradients w.r.t. the flattened classifier.

    The teacher is still the zero-shot prompt model; only the student changes.
    """
    if batch.features.shape[1] != cls.weights.shape[1]:
        raise DimensionMismatch("batch feature width does not match the classifier")
    k = cls.weights.shape[0]
    if int(batch.labels.max()) >= k:
        raise DimensionMismatch("batch label out of range for the classifier")
    n = len(batch)
    xhat = _unit_rows(batch.features, "batch")
    norms = np.sqrt((cls.weights**2).sum(axis=1))
    what = cls.weights / norms[:, None]
    cos = xhat @ what.T
    p = _row_softmax(cos, vlm.tau)
    q = _teacher_probs(vlm, xhat)

    onehot = np.zeros_like(p)
    onehot[np.arange(n), batch.labels] = 1.0

    def backprop(dlog: np.ndarray) -> np.ndarray:
        dcos = dlog / vlm.tau
        g = (dcos.T @ xhat - (dcos * cos).sum(axis=0)[:, None] * what) / norms[:, None]
        return g.ravel()

    g_ce = backprop((p - onehot) / n)
    g_kl = backprop((p - q) / n)
    return LossGrads(g_ce, g_kl, _mean_ce(p, batch.labels), _mean_kl(p, q))


def classifier_predictions(vlm: FrozenVLM, cls: CosineClassifier, features: np.ndarray) -> np.ndarray:
    """Row-wise class probabilities for a feature matrix under the classifier."""
    xhat = _unit_rows(np.ascontiguousarray(features, dtype=np.float64), "features")
    norms = np.sqrt((cls.weights**2).sum(axis=1))
    return _row_softmax(xhat @ (cls.weights / norms[:, None]).T, vlm.tau)


def grad_ce(vlm: FrozenVLM, prompt: PromptState, batch: Batch) -> np.ndarray:
    return prompt_grads(vlm, prompt, batch).g_ce


def grad_kl(vlm: FrozenVLM, prompt: PromptState, batch: Batch) -> np.ndarray:
    return prompt_grads(vlm, prompt, batch).g_kl


def grad_pair(vlm: FrozenVLM, prompt: PromptState, batch: Batch) -> GradPair:
    """Both gradients from one shared forward pass over the same batch."""
    return prompt_grads(vlm, prompt, batch).pair()


def grad_l2reg(prompt: PromptState, prompt_zs: PromptState, alpha: float) -> np.ndarray:
    """Gradient of alpha * ||v - v_zs||_2, with the zero subgradient at the kink."""
    if alpha < 0.0:
        raise ParameterError(f"alpha must be >= 0, got {alpha}")
    if prompt.v.shape != prompt_zs.v.shape:
        raise DimensionMismatch("prompt shapes differ")
    d = prompt.v.ravel() - prompt_zs.v.ravel()
    n = float(np.sqrt(np.dot(d, d)))
    if n == 0.0:
        return np.zeros_like(d)
    return alpha * d / n
