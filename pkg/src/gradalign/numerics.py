"""Dense float64 vector primitives, a portable PRNG, and a finite-difference oracle.

Everything downstream (encoder, losses, gradient surgery, data generation)
is built on these few operations, so they validate their inputs and promise
finite outputs.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, NumericalError, ParameterError

__all__ = [
    "as_vector",
    "check_probs",
    "dot",
    "l2_norm",
    "cosine_sim",
    "angle_deg",
    "softmax",
    "finite_diff_grad",
    "sample_gaussian",
    "RngStream",
]

_MASK64 = 0xFFFFFFFFFFFFFFFF


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a 1-D float64 array with finite entries and length >= 1."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        a = a.reshape(-1)
    if a.size < 1:
        raise DimensionMismatch(f"{name} must have length >= 1")
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name} contains non-finite entries")
    return a


def check_probs(p, tol: float = 1e-12) -> np.ndarray:
    """Validate a probability vector: entries >= 0 summing to 1 within tol."""
    a = as_vector(p, "probability vector")
    if np.any(a < 0.0):
        raise DegenerateInput("probability vector has negative entries")
    if abs(float(a.sum()) - 1.0) > tol:
        raise DegenerateInput("probability vector does not sum to 1")
    return a


def dot(a, b) -> float:
    """Inner product of two equal-length vectors."""
    va, vb = as_vector(a, "a"), as_vector(b, "b")
    if va.shape != vb.shape:
        raise DimensionMismatch(f"dot: lengths differ ({va.size} vs {vb.size})")
    return float(np.dot(va, vb))


def l2_norm(a) -> float:
    """Euclidean norm; zero iff the vector is zero."""
    va = as_vector(a, "a")
    return float(np.sqrt(np.dot(va, va)))


def cosine_sim(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, clamped to [-1, 1]."""
    va, vb = as_vector(a, "a"), as_vector(b, "b")
    if va.shape != vb.shape:
        raise DimensionMismatch(f"cosine_sim: lengths differ ({va.size} vs {vb.size})")
    na, nb = l2_norm(va), l2_norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInput("cosine_sim undefined for a zero vector")
    c = float(np.dot(va, vb)) / (na * nb)
    # rounding can push |c| past 1, which would NaN the downstream arccos
    return min(1.0, max(-1.0, c))


def angle_deg(a, b) -> float:
    """Angle between two nonzero vectors in degrees, in [0, 180]."""
    return math.degrees(math.acos(cosine_sim(a, b)))


def softmax(logits, tau: float) -> np.ndarray:
    """Temperature softmax exp(z_i/tau) / sum_j exp(z_j/tau).

    Uses max-subtraction; mandatory at small tau where raw exponents overflow.
    """
    if not (tau > 0.0) or not math.isfinite(tau):
        raise ParameterError(f"softmax temperature must be > 0, got {tau}")
    z = as_vector(logits, "logits") / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float) -> np.ndarray:
    """Central-difference gradient (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.

    The independent oracle for every analytic gradient in the library; it must
    never share code with the gradients it checks.
    """
    if not (h > 0.0):
        raise ParameterError(f"finite_diff_grad step must be > 0, got {h}")
    vx = as_vector(x, "x").copy()
    g = np.empty_like(vx)
    for i in range(vx.size):
        orig = vx[i]
        vx[i] = orig + h
        fp = float(f(vx))
        vx[i] = orig - h
        fm = float(f(vx))
        vx[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"finite_diff_grad: non-finite f near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class RngStream:
    """xoshiro256** stream seeded via splitmix64 from a 64-bit seed.

    A fully specified generator (no dependence on numpy's or Python's RNG
    internals) so that seeds pin byte-identical experiment outputs and golden
    traces stay valid across platforms and releases.

    Single-owner mutable: share a stream across threads only by giving each
    thread its own `child`.
    """

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            s.append(out)
        if not any(s):  # xoshiro forbids the all-zero state
            s[0] = 0x9E3779B97F4A7C15
        self._s = s

    def child(self, salt) -> "RngStream":
        """Derive an independent stream from this stream's seed and a salt.

        Pure function of (seed, salt): unaffected by draws already made, so
        substreams can be re-derived anywhere (e.g. to rebuild a test split).
        """
        tag = _fnv1a64(str(salt).encode("utf-8"))
        _, mixed = _splitmix64(self.seed ^ tag)
        return RngStream(mixed)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def next_float(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def next_float_open(self) -> float:
        """Uniform double in (0, 1], safe as a log argument."""
        return ((self.next_u64() >> 11) + 1) * 2.0**-53

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ParameterError(f"randbelow requires n > 0, got {n}")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx

    def normal_pair(self) -> tuple[float, float]:
        """One Box-Muller transform: two independent N(0,1) draws.

        Consumes exactly two uniforms; the cosine draw is emitted first.
        """
        u1 = self.next_float_open()
        u2 = self.next_float()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        return r * math.cos(theta), r * math.sin(theta)


def sample_gaussian(rng: RngStream, n: int, mean: float, sigma: float) -> np.ndarray:
    """n i.i.d. N(mean, sigma^2) draws via Box-Muller from the stream.

    Pairs are emitted cosine-first; an odd trailing element discards its sine
    partner, so the stream always advances by 2*ceil(n/2) uniform draws.
    """
    if sigma < 0.0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    out = np.empty(n, dtype=np.float64)
    for i in range(0, n - 1, 2):
        z0, z1 = rng.normal_pair()
        out[i] = mean + sigma * z0
        out[i + 1] = mean + sigma * z1
    if n % 2 == 1:
        z0, _ = rng.normal_pair()
        out[n - 1] = mean + sigma * z0
    return out


def gaussian_matrix(rng: RngStream, rows: int, cols: int, sigma: float) -> np.ndarray:
    """Row-major (rows x cols) matrix of N(0, sigma^2) draws from one stream."""
    return sample_gaussian(rng, rows * cols, 0.0, sigma).reshape(rows, cols)
