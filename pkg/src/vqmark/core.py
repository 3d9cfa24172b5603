"""Shared plumbing: keyed hashing, green-set draws, bilinear resampling, domain types.

Everything downstream (token partitions, bitwise marks, attacks) leans on the
deterministic primitives in this module, so their recipes are fixed bit-exactly
and documented in docs/hashing.md. No global RNG state is used anywhere; every
draw is a pure function of a 64-bit seed and a counter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

__all__ = [
    "MASK64",
    "GOLDEN64",
    "mix64",
    "mix64_array",
    "context_hash",
    "context_hash_array",
    "stream_draw",
    "green_set",
    "green_member_array",
    "resize_matrix",
    "bilinear_resize",
    "bilinear_resize_adjoint",
    "WatermarkKey",
    "Codebook",
    "DetectionReport",
    "validate_image",
    "quantize_u8",
    "dequantize_u8",
]

MASK64 = (1 << 64) - 1
# Weyl increment and multipliers of the splitmix64 finalizer.
GOLDEN64 = 0x9E3779B97F4A7C15
_MULT_A = 0xBF58476D1CE4E5B9
_MULT_B = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """64-bit avalanche mixer (the splitmix64 finalizer, not the stepped
    generator: callers that want a stream add Weyl increments themselves)."""
    x = int(x) & MASK64
    x = ((x ^ (x >> 30)) * _MULT_A) & MASK64
    x = ((x ^ (x >> 27)) * _MULT_B) & MASK64
    return (x ^ (x >> 31)) & MASK64


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized mix64 on uint64 arrays. Identical output to mix64 lane-wise."""
    x = x.astype(np.uint64, copy=True)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_MULT_A)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_MULT_B)
    return x ^ (x >> np.uint64(31))


def context_hash(tokens, key: int) -> int:
    """Keyed hash of a token window: fold mix64 over the key, then each token.

    h = mix64(key); h = mix64(h XOR mix64(t)) for each token t, in order.
    An empty window hashes to mix64(key). Token values must be nonnegative
    ints (sentinel padding included); the fold is order-sensitive.
    """
    h = mix64(key & MASK64)
    for t in tokens:
        h = mix64(h ^ mix64(int(t)))
    return h


def context_hash_array(windows: np.ndarray, key: int) -> np.ndarray:
    """context_hash over the last axis of an integer array, vectorized."""
    windows = np.asarray(windows, dtype=np.uint64)
    h = np.full(windows.shape[:-1], mix64(key & MASK64), dtype=np.uint64)
    for j in range(windows.shape[-1]):
        h = mix64_array(h ^ mix64_array(windows[..., j]))
    return h


def stream_draw(seed: int, index: int) -> int:
    """n-th value of the counter stream at `seed`: mix64(seed + (n+1)*GOLDEN64)."""
    return mix64((seed + (index + 1) * GOLDEN64) & MASK64)


def _stream_draw_array(seeds: np.ndarray, counters: np.ndarray) -> np.ndarray:
    inc = (counters.astype(np.uint64) + np.uint64(1)) * np.uint64(GOLDEN64)
    return mix64_array(seeds.astype(np.uint64) + inc)


def green_set(seed: int, vocab_size: int, gamma: float) -> np.ndarray:
    """Draw the green subset for one context seed.

    A partial Fisher-Yates shuffle of [0, vocab_size) selects
    g = floor(gamma * vocab_size) indices; swap positions come from the
    counter stream at `seed` with rejection sampling, so each index is
    selected with probability exactly g / vocab_size. Returns the sorted
    index array. gamma must lie in (0, 1) and g must be >= 1.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    g = int(gamma * vocab_size)
    if g < 1:
        raise ValueError(f"gamma*vocab_size < 1 (gamma={gamma}, V={vocab_size})")
    perm = np.arange(vocab_size, dtype=np.int64)
    counter = 0
    for t in range(g):
        span = vocab_size - t
        limit = ((1 << 64) // span) * span
        while True:
            u = stream_draw(seed, counter)
            counter += 1
            if u < limit:
                break
        j = t + (u % span)
        perm[t], perm[j] = perm[j], perm[t]
    sel = np.sort(perm[:g])
    return sel


def green_member_array(seeds: np.ndarray, tokens: np.ndarray, vocab_size: int,
                       gamma: float) -> np.ndarray:
    """Membership of tokens[i] in green_set(seeds[i], ...) for all lanes at once.

    Replays the same partial Fisher-Yates draw sequence as green_set but only
    tracks where each lane's queried token sits in the evolving permutation
    (one integer per lane), so detection over millions of positions stays in
    numpy. Bit-exact with green_set by construction: same stream, same
    rejection discipline.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    g = int(gamma * vocab_size)
    if g < 1:
        raise ValueError(f"gamma*vocab_size < 1 (gamma={gamma}, V={vocab_size})")
    seeds = np.asarray(seeds, dtype=np.uint64)
    pos = np.asarray(tokens, dtype=np.uint64).copy()  # perm starts as identity
    counters = np.zeros(seeds.shape, dtype=np.uint64)
    two64 = 1 << 64
    for t in range(g):
        span = vocab_size - t
        limit = np.uint64((two64 // span) * span) if (two64 % span) else None
        u = _stream_draw_array(seeds, counters)
        counters += np.uint64(1)
        if limit is not None:
            reject = u >= limit
            while reject.any():
                u[reject] = _stream_draw_array(seeds[reject], counters[reject])
                counters[reject] += np.uint64(1)
                reject[reject] = u[reject] >= limit
        j = np.uint64(t) + u % np.uint64(span)
        at_j = pos == j
        at_t = pos == np.uint64(t)
        pos[at_j] = np.uint64(t)
        pos[at_t] = j[at_t]
    return pos < np.uint64(g)


# ---------------------------------------------------------------------------
# Bilinear resampling (edge-aligned, a.k.a. half-pixel-center convention)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear resampling matrix (n_out, n_in), edge-aligned convention.

    Output sample i reads the source at (i + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1], interpolating the two neighbouring samples.
    Rows are nonnegative and sum to 1, and n_out == n_in gives the identity,
    so constants survive any up/down composition exactly.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be >= 1")
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    j0 = np.floor(src).astype(np.int64)
    j0 = np.minimum(j0, n_in - 1)
    j1 = np.minimum(j0 + 1, n_in - 1)
    w1 = src - j0
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    mat[rows, j0] += 1.0 - w1
    mat[rows, j1] += w1
    return mat


def bilinear_resize(x: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Resample the trailing two axes of x to (h_out, w_out).

    Linear in x (it is a fixed tensor contraction), which the attack
    gradients rely on; see bilinear_resize_adjoint for the exact transpose.
    """
    x = np.asarray(x, dtype=np.float64)
    mr = resize_matrix(x.shape[-2], h_out)
    mc = resize_matrix(x.shape[-1], w_out)
    return np.einsum("oh,...hw,pw->...op", mr, x, mc, optimize=True)


def bilinear_resize_adjoint(g: np.ndarray, h_in: int, w_in: int) -> np.ndarray:
    """Exact transpose of bilinear_resize: pulls a gradient at (h_out, w_out)
    back to an (h_in, w_in) input."""
    g = np.asarray(g, dtype=np.float64)
    mr = resize_matrix(h_in, g.shape[-2])
    mc = resize_matrix(w_in, g.shape[-1])
    return np.einsum("oh,...op,pw->...hw", mr, g, mc, optimize=True)


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class WatermarkKey:
    """Keyed context for partition schemes: 64-bit key plus window length l.

    Windows shorter than l (sequence starts) are padded by the caller with
    the sentinel token value vocab_size, which never occurs in real data.
    """

    key: int
    context_len: int = 1

    def __post_init__(self):
        if not 0 <= self.key <= MASK64:
            raise ValueError("key must fit in 64 bits")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")


@dataclass(frozen=True)
class Codebook:
    """Vector-quantizer codebook: rows are code vectors, all distinct."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2:
            raise ValueError("codebook needs shape (V, d) with V >= 2")
        object.__setattr__(self, "vectors", v)
        # catches duplicate rows early; quantizer tie-breaks would hide them
        d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        if np.min(d2) == 0.0:
            raise ValueError("codebook contains identical vectors")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def min_pairwise_distance(self) -> float:
        v = self.vectors
        d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        return float(np.sqrt(np.min(d2)))


@dataclass(frozen=True)
class DetectionReport:
    """Outcome of one statistical verification.

    trials is the number of scored positions, n_green the hits, gamma the
    null hit probability; z and p are the normal score and the exact
    right-tailed binomial p-value, and detected_at maps an FPR level to the
    decision p < level. per_scale, when present, holds
    (scale_index, trials, n_green, green_minus_red) tuples.
    """

    trials: int
    n_green: int
    gamma: float
    z: float
    p: float
    detected_at: dict = field(default_factory=dict)
    per_scale: tuple = ()

    def __post_init__(self):
        if not 0 <= self.n_green <= self.trials:
            raise ValueError("n_green must lie in [0, trials]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")


# ---------------------------------------------------------------------------
# Pixel-domain helpers


def validate_image(x: np.ndarray) -> np.ndarray:
    """Check (H, W, 3) float64 in [0, 1] and return the array unchanged."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {x.shape}")
    if x.dtype != np.float64:
        raise ValueError("image must be float64")
    if not np.isfinite(x).all():
        raise ValueError("image contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return x


def quantize_u8(x: np.ndarray) -> np.ndarray:
    """[0,1] float -> uint8 by round(x*255)."""
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize_u8(q: np.ndarray) -> np.ndarray:
    """uint8 -> float64 in [0,1]; quantize_u8(dequantize_u8(q)) == q exactly."""
    return np.asarray(q, dtype=np.float64) / 255.0
