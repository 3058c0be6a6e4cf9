"""Deterministic scalar/vector kernels shared by every module.

Reductions accumulate in float64; values are rounded to float32 only
where a caller stores them.  Randomness comes from a counter-based
SplitMix64 stream, so a seed fully determines every draw, bit for bit,
on any platform.
"""

import numpy as np

_U64 = np.uint64
_MASK64 = 0xFFFFFFFFFFFFFFFF

# SplitMix64 constants (Steele, Lea & Flood, 2014).
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def _mix(z):
    """SplitMix64 finalizer over a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


class Rng:
    """Counter-based SplitMix64 stream.

    Output i is ``mix(seed + (i+1) * GOLDEN)``; the instance only tracks
    how many outputs were consumed.  Single-owner by design: concurrent
    consumers should each take a child via :meth:`spawn`.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._consumed = 0

    def _raw(self, n: int) -> np.ndarray:
        start = self._consumed + 1
        self._consumed += n
        with np.errstate(over="ignore"):
            idx = np.arange(start, start + n, dtype=np.uint64)
            return _mix(_U64(self.seed) + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n i.i.d. float64 samples in [0, 1) with 53-bit resolution."""
        return (self._raw(n) >> _U64(11)).astype(np.float64) * 2.0**-53

    def shuffled(self, n: int) -> np.ndarray:
        """A seeded permutation of range(n)."""
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, index: int) -> "Rng":
        """Child stream for a named substream; child seed = hash(seed, index)."""
        with np.errstate(over="ignore"):
            key = _mix(np.array([(index + 1) & _MASK64], dtype=np.uint64) * _GOLDEN)
            child = _mix(np.array([self.seed], dtype=np.uint64) ^ key)
        return Rng(int(child[0]))


def gaussian(rng: Rng, n: int, sigma: float) -> np.ndarray:
    """n i.i.d. N(0, sigma^2) samples via Box-Muller on the uniform stream.

    sigma = 0 returns exact zeros.  An odd n still consumes n+1 pairs'
    worth of uniforms so the stream position is shape-independent only
    per call, not per sample.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if n == 0:
        return np.zeros(0)
    if sigma == 0.0:
        return np.zeros(n)
    half = (n + 1) // 2
    u1 = rng.uniform(half)
    u2 = rng.uniform(half)
    # 1 - u1 lies in (0, 1], so the log never sees zero.
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = (2.0 * np.pi) * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
    return sigma * z


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        raise ValueError("zero-norm input to cosine_sim")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over a 1-D array of finite logits."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite logit in softmax input")
    e = np.exp(x - np.max(x))
    return e / np.sum(e)


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Rows scaled to unit Euclidean norm (float64); zero rows are an error."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    bad = np.nonzero(norms.ravel() <= 1e-12)[0]
    if bad.size:
        raise ValueError(f"zero-norm row {bad[0]}")
    return x / norms
