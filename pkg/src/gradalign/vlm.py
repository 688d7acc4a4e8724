"""Frozen desk-scale vision-language stand-in.

The text side is a frozen random affine map followed by tanh and L2
normalization: prompt vectors and a class token go in, a unit feature comes
out. Class probabilities are a temperature softmax over cosine similarities
between those text features and a (synthetic) image feature. The hand-crafted
prompt held by the model defines the zero-shot teacher.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, NumericalError, ParameterError
from .numerics import RngStream, as_vector, gaussian_matrix, sample_gaussian, softmax

__all__ = [
    "FrozenVLM",
    "PromptState",
    "CosineClassifier",
    "init_prompt",
    "encode_text",
    "class_features",
    "predict_probs",
    "zero_shot_probs",
    "cosine_classifier_probs",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FrozenVLM:
    """Immutable encoder weights, class tokens, hand prompt and temperature.

    Shapes: enc_weights (feat_dim, (m+1)*tok_dim), enc_bias (feat_dim,),
    class_tokens (k, tok_dim), hand_prompt (m_hand, tok_dim), m_hand <= m.
    """

    enc_weights: np.ndarray
    enc_bias: np.ndarray
    class_tokens: np.ndarray
    hand_prompt: np.ndarray
    tau: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "enc_weights", _freeze(self.enc_weights))
        object.__setattr__(self, "enc_bias", _freeze(self.enc_bias))
        object.__setattr__(self, "class_tokens", _freeze(self.class_tokens))
        object.__setattr__(self, "hand_prompt", _freeze(self.hand_prompt))
        if not (self.tau > 0.0):
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        for name in ("enc_weights", "enc_bias", "class_tokens", "hand_prompt"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"{name} contains non-finite entries")
        in_dim = self.enc_weights.shape[1]
        if in_dim % self.tok_dim != 0 or in_dim // self.tok_dim < 2:
            raise DimensionMismatch("enc_weights width must be (m+1)*tok_dim")
        if self.m_hand > self.m:
            raise DimensionMismatch("hand prompt longer than context length")
        if self.hand_prompt.shape[1] != self.tok_dim:
            raise DimensionMismatch("hand prompt token width mismatch")

    @property
    def tok_dim(self) -> int:
        return self.class_tokens.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.enc_bias.size

    @property
    def k(self) -> int:
        return self.class_tokens.shape[0]

    @property
    def m(self) -> int:
        return self.enc_weights.shape[1] // self.tok_dim - 1

    @property
    def m_hand(self) -> int:
        return self.hand_prompt.shape[0]

    @classmethod
    def create(
        cls,
        seed: int,
        m: int = 16,
        m_hand: int = 4,
        tok_dim: int = 8,
        feat_dim: int = 32,
        k: int = 10,
        tau: float = 0.01,
    ) -> "FrozenVLM":
        """Draw a frozen model from one seeded stream.

        Draw order is part of the reproducibility contract: encoder weights
        (row-major), encoder bias, class tokens (row-major), hand prompt
        (row-major). Encoder entries are N(0, 1/sqrt(fan_in)); token
        embeddings are N(0, 1).
        """
        rng = RngStream(seed)
        in_dim = (m + 1) * tok_dim
        sigma_w = 1.0 / np.sqrt(in_dim)
        enc_weights = gaussian_matrix(rng, feat_dim, in_dim, sigma_w)
        enc_bias = sample_gaussian(rng, feat_dim, 0.0, sigma_w)
        class_tokens = gaussian_matrix(rng, k, tok_dim, 1.0)
        hand_prompt = gaussian_matrix(rng, m_hand, tok_dim, 1.0)
        return cls(enc_weights, enc_bias, class_tokens, hand_prompt, tau, int(seed))

    def to_json(self) -> str:
        doc = {
            "schema": "frozen_vlm.v1",
            "m": self.m,
            "m_hand": self.m_hand,
            "tok_dim": self.tok_dim,
            "feat_dim": self.feat_dim,
            "k": self.k,
            "tau": self.tau,
            "seed": self.seed,
            "enc_weights": self.enc_weights.ravel().tolist(),
            "enc_bias": self.enc_bias.tolist(),
            "class_tokens": self.class_tokens.ravel().tolist(),
            "hand_prompt": self.hand_prompt.ravel().tolist(),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FrozenVLM":
        doc = json.loads(text)
        if doc.get("schema") != "frozen_vlm.v1":
            raise ParameterError(f"unsupported model schema: {doc.get('schema')!r}")
        m, m_hand = doc["m"], doc["m_hand"]
        tok_dim, feat_dim, k = doc["tok_dim"], doc["feat_dim"], doc["k"]
        return cls(
            np.array(doc["enc_weights"], dtype=np.float64).reshape(feat_dim, (m + 1) * tok_dim),
            np.array(doc["enc_bias"], dtype=np.float64),
            np.array(doc["class_tokens"], dtype=np.float64).reshape(k, tok_dim),
            np.array(doc["hand_prompt"], dtype=np.float64).reshape(m_hand, tok_dim),
            float(doc["tau"]),
            int(doc["seed"]),
        )


@dataclass
class PromptState:
    """The learnable context vectors, shape (m, tok_dim)."""

    v: np.ndarray

    def __post_init__(self):
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)
        if self.v.ndim != 2:
            raise DimensionMismatch("prompt must be a (m, tok_dim) array")
        if not np.all(np.isfinite(self.v)):
            raise NumericalError("prompt contains non-finite entries")

    def flat(self) -> np.ndarray:
        return self.v.ravel().copy()

    @classmethod
    def from_flat(cls, flat: np.ndarray, m: int, tok_dim: int) -> "PromptState":
        return cls(np.asarray(flat, dtype=np.float64).reshape(m, tok_dim).copy())


@dataclass
class CosineClassifier:
    """Per-class weight vectors scored by cosine similarity, shape (k, feat_dim)."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise DimensionMismatch("classifier weights must be (k, feat_dim)")
        if not np.all(np.isfinite(self.weights)):
            raise NumericalError("classifier weights contain non-finite entries")
        norms = np.sqrt((self.weights**2).sum(axis=1))
        if np.any(norms == 0.0):
            raise DegenerateInput("classifier has an all-zero weight row")

    @classmethod
    def create(cls, seed: int, k: int, feat_dim: int) -> "CosineClassifier":
        rng = RngStream(seed)
        w = gaussian_matrix(rng, k, feat_dim, 1.0 / np.sqrt(feat_dim))
        return cls(w)

    def flat(self) -> np.ndarray:
        return self.weights.ravel().copy()


def init_prompt(vlm: FrozenVLM) -> PromptState:
    """Zero-pad the hand prompt to the full context length.

    The first m - m_hand vectors are zero, the last m_hand are the hand
    prompt verbatim; this is both the trainable initialization and the
    (frozen) prompt behind the zero-shot teacher.
    """
    v = np.zeros((vlm.m, vlm.tok_dim), dtype=np.float64)
    v[vlm.m - vlm.m_hand :] = vlm.hand_prompt
    return PromptState(v)


def _encode_raw(vlm: FrozenVLM, z: np.ndarray):
    """Shared encoder core: affine, tanh, normalize. Returns (u, norm, w)."""
    a = vlm.enc_weights @ z + vlm.enc_bias
    u = np.tanh(a)
    nu = float(np.sqrt(np.dot(u, u)))
    if nu == 0.0:
        raise DegenerateInput("encoder output is numerically zero")
    return u, nu, u / nu


def encode_text(vlm: FrozenVLM, context: np.ndarray, class_token) -> np.ndarray:
    """Unit text feature for (context vectors, class token)."""
    ctx = np.asarray(context, dtype=np.float64)
    if ctx.shape != (vlm.m, vlm.tok_dim):
        raise DimensionMismatch(f"context must be ({vlm.m}, {vlm.tok_dim}), got {ctx.shape}")
    tok = as_vector(class_token, "class_token")
    if tok.size != vlm.tok_dim:
        raise DimensionMismatch("class token width mismatch")
    z = np.concatenate([ctx.ravel(), tok])
    return _encode_raw(vlm, z)[2]


class EncodeCache:
    """Forward intermediates for all k classes, kept for backprop.

    feats[i] is bitwise identical to encode_text on class i because both go
    through _encode_raw with the same concatenated input.
    """

    __slots__ = ("u", "norms", "feats")

    def __init__(self, vlm: FrozenVLM, v: np.ndarray):
        k = vlm.k
        self.u = np.empty((k, vlm.feat_dim))
        self.norms = np.empty(k)
        self.feats = np.empty((k, vlm.feat_dim))
        vflat = v.ravel()
        for i in range(k):
            z = np.concatenate([vflat, vlm.class_tokens[i]])
            self.u[i], self.norms[i], self.feats[i] = _encode_raw(vlm, z)


def class_features(vlm: FrozenVLM, prompt: PromptState) -> np.ndarray:
    """Unit text features for every class under the given prompt, (k, feat_dim)."""
    if prompt.v.shape != (vlm.m, vlm.tok_dim):
        raise DimensionMismatch("prompt shape does not match the model")
    return EncodeCache(vlm, prompt.v).feats


def _unit_image(x) -> np.ndarray:
    f = as_vector(x, "image feature")
    n = float(np.sqrt(np.dot(f, f)))
    if n == 0.0:
        raise DegenerateInput("image feature is the zero vector")
    return f / n


def predict_probs(vlm: FrozenVLM, prompt: PromptState, x) -> np.ndarray:
    """Class probabilities: softmax over cosine(text feature, x) / tau."""
    feats = class_features(vlm, prompt)
    xhat = _unit_image(x)
    if xhat.size != vlm.feat_dim:
        raise DimensionMismatch("image feature width mismatch")
    return softmax(feats @ xhat, vlm.tau)


def zero_shot_probs(vlm: FrozenVLM, x) -> np.ndarray:
    """Teacher prediction: the forward pass at the frozen zero-padded hand prompt."""
    return predict_probs(vlm, init_prompt(vlm), x)


def cosine_classifier_probs(cls: CosineClassifier, x, tau: float) -> np.ndarray:
    """Softmax over cosine(weight row, x) / tau."""
    xhat = _unit_image(x)
    if xhat.size != cls.weights.shape[1]:
        raise DimensionMismatch("image feature width mismatch")
    norms = np.sqrt((cls.weights**2).sum(axis=1))
    cosines = (cls.weights @ xhat) / norms
    return softmax(np.clip(cosines, -1.0, 1.0), tau)
