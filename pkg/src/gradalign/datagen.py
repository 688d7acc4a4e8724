"""Synthetic class-conditional domains on the unit sphere.

The pre-trained domain puts class prototypes near the zero-shot teacher's own
class features, so the teacher is non-trivially accurate on it. A downstream
domain is derived by rotating each prototype inside a random 2-plane and
shifting along a random direction; the rotation angle and shift length are the
controllable stand-in for the pre-train/downstream distribution gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInput, ParameterError
from .losses import Batch
from .numerics import RngStream, gaussian_matrix, sample_gaussian
from .vlm import FrozenVLM, class_features, init_prompt

__all__ = [
    "DomainSpec",
    "Episode",
    "TEST_PER_CLASS",
    "teacher_aligned_prototypes",
    "shift_domain",
    "split_base_new",
    "sample_episode",
    "episode_test_batch",
]

TEST_PER_CLASS = 100


@dataclass(frozen=True)
class DomainSpec:
    """Knobs for one synthetic domain family."""

    k: int
    feat_dim: int
    gap_rotation_deg: float = 0.0
    gap_shift: float = 0.0
    noise_sigma: float = 0.3
    proto_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ParameterError(f"need k >= 2 classes, got {self.k}")
        if self.feat_dim < 2:
            raise ParameterError(f"need feat_dim >= 2, got {self.feat_dim}")
        if not (self.noise_sigma > 0.0):
            raise ParameterError("noise_sigma must be > 0")
        if self.gap_rotation_deg < 0.0 or self.gap_shift < 0.0 or self.proto_jitter < 0.0:
            raise ParameterError("gap and jitter parameters must be >= 0")
        for f in (self.gap_rotation_deg, self.gap_shift, self.noise_sigma, self.proto_jitter):
            if not math.isfinite(f):
                raise ParameterError("domain parameters must be finite")


@dataclass
class Episode:
    """One sampled few-shot task plus its fixed evaluation split."""

    train: Batch
    test: Batch
    base_classes: frozenset[int]
    new_classes: frozenset[int]
    shots: int


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.sqrt((rows**2).sum(axis=1))
    if np.any(norms == 0.0):
        raise DegenerateInput("cannot normalize a zero row")
    return rows / norms[:, None]


def teacher_aligned_prototypes(vlm: FrozenVLM, spec: DomainSpec) -> np.ndarray:
    """Unit prototypes near the teacher's class features, (k, feat_dim).

    proto_jitter controls how far each prototype sits from the teacher feature
    of its class; the jitter draws are consumed even at jitter 0 so the stream
    layout does not depend on the knob's value.
    """
    if spec.k != vlm.k or spec.feat_dim != vlm.feat_dim:
        raise ConfigError("domain spec dimensions do not match the model")
    rng = RngStream(spec.seed).child("prototypes")
    tfeats = class_features(vlm, init_prompt(vlm))
    eps = gaussian_matrix(rng, spec.k, spec.feat_dim, spec.proto_jitter)
    return _unit_rows(tfeats + eps)


def shift_domain(prototypes: np.ndarray, spec: DomainSpec) -> np.ndarray:
    """Rotate each prototype by gap_rotation_deg inside a seeded random 2-plane,
    add gap_shift along one seeded random direction, then renormalize.

    Both gap parameters at zero return the input bitwise. Draw order (shift
    direction first, then one plane partner per prototype) is fixed so that
    sweeping the rotation angle reuses identical planes.
    """
    protos = np.asarray(prototypes, dtype=np.float64)
    if spec.gap_rotation_deg == 0.0 and spec.gap_shift == 0.0:
        return protos.copy()
    k, d = protos.shape
    rng = RngStream(spec.seed).child("domain-shift")
    shift_dir = sample_gaussian(rng, d, 0.0, 1.0)
    shift_dir = shift_dir / np.sqrt(np.dot(shift_dir, shift_dir))
    theta = math.radians(spec.gap_rotation_deg)
    out = np.empty_like(protos)
    for i in range(k):
        p = protos[i] / np.sqrt(np.dot(protos[i], protos[i]))
        while True:
            r = sample_gaussian(rng, d, 0.0, 1.0)
            q = r - np.dot(r, p) * p
            qn = float(np.sqrt(np.dot(q, q)))
            if qn > 1e-9:
                break
        q = q / qn
        rotated = math.cos(theta) * p + math.sin(theta) * q
        shifted = rotated + spec.gap_shift * shift_dir
        out[i] = shifted / np.sqrt(np.dot(shifted, shifted))
    return out


def split_base_new(k: int, seed: int) -> tuple[frozenset[int], frozenset[int]]:
    """Seeded shuffle of 0..k-1; the first ceil(k/2) classes are base."""
    if k < 2:
        raise ParameterError(f"need k >= 2 to split, got {k}")
    order = list(range(k))
    RngStream(seed).shuffle(order)
    nb = (k + 1) // 2
    return frozenset(order[:nb]), frozenset(order[nb:])


def _sample_class_rows(proto: np.ndarray, count: int, sigma: float, rng: RngStream) -> np.ndarray:
    d = proto.size
    rows = np.empty((count, d))
    for j in range(count):
        rows[j] = proto + sample_gaussian(rng, d, 0.0, sigma)
    return _unit_rows(rows)


def episode_test_batch(prototypes: np.ndarray, spec: DomainSpec, seed: int) -> Batch:
    """Fixed TEST_PER_CLASS examples per class over all classes.

    Uses the episode seed's "test" substream, so evaluation sets for shifted
    prototype sets pair up example-for-example with the source test set.
    """
    rng = RngStream(seed).child("test")
    k = prototypes.shape[0]
    feats, labels = [], []
    for c in range(k):
        feats.append(_sample_class_rows(prototypes[c], TEST_PER_CLASS, spec.noise_sigma, rng))
        labels.extend([c] * TEST_PER_CLASS)
    return Batch(np.vstack(feats), np.asarray(labels, dtype=np.int64))


def sample_episode(prototypes: np.ndarray, spec: DomainSpec, shots: int, seed: int) -> Episode:
    """Few-shot episode: `shots` train examples per base class, full test split.

    Split, train draws and test draws come from disjoint child streams of the
    episode seed, so the episode is a pure function of (prototypes, spec,
    shots, seed) and train/test never share a sample.
    """
    if shots < 1:
        raise ParameterError(f"shots must be >= 1, got {shots}")
    k = prototypes.shape[0]
    if k != spec.k:
        raise ConfigError("prototype count does not match the domain spec")
    base, new = split_base_new(k, RngStream(seed).child("split").seed)
    train_rng = RngStream(seed).child("train")
    feats, labels = [], []
    for c in sorted(base):
        feats.append(_sample_class_rows(prototypes[c], shots, spec.noise_sigma, train_rng))
        labels.extend([c] * shots)
    train = Batch(np.vstack(feats), np.asarray(labels, dtype=np.int64))
    test = episode_test_batch(prototypes, spec, seed)
    return Episode(train, test, base, new, shots)
