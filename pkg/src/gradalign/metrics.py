"""Scalar evaluation metrics shared by the trainer and the experiment harness."""

from __future__ import annotations

from typing import Optional, Sequence

from .errors import DimensionMismatch, ParameterError

__all__ = ["harmonic_mean", "failure_overlap"]


def harmonic_mean(a: float, b: float) -> float:
    """2ab/(a+b) of two accuracies in [0, 1]; 0 when both are 0."""
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise ParameterError(f"accuracies must be in [0, 1], got {a}, {b}")
    if a + b == 0.0:
        return 0.0
    return 2.0 * a * b / (a + b)


def failure_overlap(
    pred_a: Sequence[int],
    pred_b: Sequence[int],
    pred_zs: Sequence[int],
    truth: Sequence[int],
) -> Optional[float]:
    """Among samples where pred_a is wrong but pred_b is right, the fraction the
    zero-shot reference also gets wrong. None when that failure set is empty."""
    n = len(truth)
    if not (len(pred_a) == len(pred_b) == len(pred_zs) == n) or n < 1:
        raise DimensionMismatch("prediction and truth lengths must match and be >= 1")
    failures = [i for i in range(n) if pred_a[i] != truth[i] and pred_b[i] == truth[i]]
    if not failures:
        return None
    zs_wrong = sum(1 for i in failures if pred_zs[i] != truth[i])
    return zs_wrong / len(failures)
