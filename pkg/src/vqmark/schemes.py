"""Token-level watermarking schemes over a seeded toy autoregressive model.

Three schemes share the machinery here:

* keyed green/red partition with logit bias (the classic hash-the-context
  approach), operating directly on token ids;
* the same partition lifted to cluster ids of the codebook (tokens inherit
  the color of their cluster), which buys robustness to within-cluster
  substitutions;
* pairing of similar codewords with red-to-green substitution after
  sampling, detected against a fair-coin null.

The toy model's logits are a seeded pseudo-random table keyed by the context
hash, so sequences are reproducible and context-dependent without any
training. All samplers and detectors are internally batched; the scalar API
is the batch-of-one special case, so the two can never drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import (GOLDEN64, MASK64, WatermarkKey, Codebook, DetectionReport,
                   context_hash_array, green_member_array, mix64,
                   mix64_array)
from .stats import detection_report

__all__ = [
    "ToyARModel",
    "sample_tokens",
    "sample_tokens_batch",
    "embed_kgw",
    "embed_kgw_batch",
    "detect_kgw",
    "count_green_kgw",
    "ClusterAssignment",
    "cluster_codebook",
    "embed_clustermark",
    "embed_clustermark_batch",
    "detect_clustermark",
    "count_green_clustermark",
    "TokenPairing",
    "build_pairing",
    "embed_indexmark",
    "detect_indexmark",
]


@dataclass(frozen=True)
class ToyARModel:
    """Stationary toy language model over [0, vocab_size).

    Logits for a context are read from a seeded pseudo-random table keyed by
    the hash of the previous `context_len` tokens (sentinel-padded at the
    sequence start), each logit uniform in [-logit_scale, logit_scale].
    temperature == 0 means argmax decoding.
    """

    seed: int
    vocab_size: int
    temperature: float = 1.0
    logit_scale: float = 1.0
    context_len: int = 1

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")


def _model_logits(model: ToyARModel, ctx_hashes: np.ndarray) -> np.ndarray:
    offsets = (np.arange(1, model.vocab_size + 1, dtype=np.uint64)
               * np.uint64(GOLDEN64))
    u = mix64_array(ctx_hashes[:, None] + offsets[None, :])
    unit = u.astype(np.float64) * 2.0 ** -64
    return (2.0 * unit - 1.0) * model.logit_scale


def _window(tokens: np.ndarray, step: int, width: int, sentinel: int) -> np.ndarray:
    """Previous `width` entries before `step`, sentinel-padded on the left."""
    b = tokens.shape[0]
    out = np.full((b, width), sentinel, dtype=np.int64)
    have = min(step, width)
    if have:
        out[:, width - have:] = tokens[:, step - have:step]
    return out


def _green_mask_batch(seeds: np.ndarray, n_labels: int, gamma: float) -> np.ndarray:
    """Full green indicator (B, n_labels) for each context seed.

    Same partial Fisher-Yates stream as core.green_set, vectorized across
    lanes; used at embedding time where the whole set is needed for the
    logit bias.
    """
    g = int(gamma * n_labels)
    if g < 1:
        raise ValueError("gamma * n_labels < 1")
    seeds = np.asarray(seeds, dtype=np.uint64)
    b = seeds.shape[0]
    perm = np.tile(np.arange(n_labels, dtype=np.int64), (b, 1))
    counters = np.zeros(b, dtype=np.uint64)
    rows = np.arange(b)
    two64 = 1 << 64
    for t in range(g):
        span = n_labels - t
        rem = two64 % span
        limit = np.uint64(two64 - rem) if rem else None
        inc = (counters + np.uint64(1)) * np.uint64(GOLDEN64)
        u = mix64_array(seeds + inc)
        counters += np.uint64(1)
        if limit is not None:
            reject = u >= limit
            while reject.any():
                inc = (counters[reject] + np.uint64(1)) * np.uint64(GOLDEN64)
                u[reject] = mix64_array(seeds[reject] + inc)
                counters[reject] += np.uint64(1)
                reject[reject] = u[reject] >= limit
        j = (np.uint64(t) + u % np.uint64(span)).astype(np.int64)
        tmp = perm[rows, j].copy()
        perm[rows, j] = perm[rows, t]
        perm[rows, t] = tmp
    mask = np.zeros((b, n_labels), dtype=bool)
    mask[rows[:, None], perm[:, :g]] = True
    return mask


def _ancestral_sample(model: ToyARModel, length: int, rng_seeds: np.ndarray,
                      bias=None) -> np.ndarray:
    """Sample (B, length) sequences in lockstep; optional green-logit bias.

    bias, when given, is (key, gamma, delta, labels, n_labels): at every step
    the green label set is drawn from the hash of the previous key.context_len
    labels (sentinel n_labels at the start) and delta is added to the logits
    of all tokens whose label is green.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng_seeds = np.asarray(rng_seeds, dtype=np.uint64)
    b = rng_seeds.shape[0]
    tokens = np.zeros((b, length), dtype=np.int64)
    v = model.vocab_size
    for t in range(length):
        win = _window(tokens, t, model.context_len, sentinel=v)
        logits = _model_logits(model, context_hash_array(win, model.seed))
        if bias is not None:
            key, gamma, delta, labels, n_labels = bias
            lab_prev = labels[_window(tokens, t, key.context_len, sentinel=0)]
            # sentinel positions must map to the label sentinel, not label[0]
            raw = _window(tokens, t, key.context_len, sentinel=-1)
            lab_prev[raw < 0] = n_labels
            seeds = context_hash_array(lab_prev, key.key)
            green = _green_mask_batch(seeds, n_labels, gamma)
            logits = logits + delta * green[np.arange(b)[:, None], labels[None, :]]
        if model.temperature == 0.0:
            tokens[:, t] = np.argmax(logits, axis=1)
            continue
        z = logits / model.temperature
        z -= z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        cum = np.cumsum(probs, axis=1)
        inc = np.uint64(((t + 1) * GOLDEN64) & MASK64)
        u = mix64_array(rng_seeds + inc).astype(np.float64) * 2.0 ** -64
        tokens[:, t] = np.minimum(np.sum(cum <= u[:, None], axis=1), v - 1)
    return tokens


def sample_tokens_batch(model: ToyARModel, length: int, rng_seeds) -> np.ndarray:
    return _ancestral_sample(model, length, np.asarray(rng_seeds))


def sample_tokens(model: ToyARModel, length: int, rng_seed: int) -> np.ndarray:
    """Unwatermarked ancestral sample of `length` tokens."""
    return _ancestral_sample(model, length, np.array([rng_seed]))[0]


def _count_green(tokens: np.ndarray, key: WatermarkKey, gamma: float,
                 labels: np.ndarray, n_labels: int) -> np.ndarray:
    """Green hits per row for scored positions l..L-1. tokens is (B, L)."""
    tokens = np.asarray(tokens)
    l = key.context_len
    if tokens.shape[1] <= l:
        raise ValueError(f"sequence length must exceed context_len={l}")
    lab = labels[tokens]
    windows = sliding_window_view(lab, l, axis=1)[:, :-1, :]
    seeds = context_hash_array(windows, key.key)
    observed = lab[:, l:]
    member = green_member_array(seeds.ravel(), observed.ravel(), n_labels, gamma)
    return member.reshape(observed.shape).sum(axis=1)


# ---------------------------------------------------------------------------
# Keyed partition on raw token ids


def embed_kgw_batch(model: ToyARModel, key: WatermarkKey, gamma: float,
                    delta: float, length: int, rng_seeds) -> np.ndarray:
    if delta < 0:
        raise ValueError("delta must be >= 0")
    labels = np.arange(model.vocab_size, dtype=np.int64)
    bias = (key, gamma, delta, labels, model.vocab_size)
    return _ancestral_sample(model, length, np.asarray(rng_seeds), bias=bias)


def embed_kgw(model: ToyARModel, key: WatermarkKey, gamma: float, delta: float,
              length: int, rng_seed: int) -> np.ndarray:
    """Sample with +delta on the logits of the keyed green set at each step."""
    return embed_kgw_batch(model, key, gamma, delta, length, [rng_seed])[0]


def count_green_kgw(tokens, key: WatermarkKey, gamma: float,
                    vocab_size: int) -> np.ndarray:
    """Green hit counts for a (B, L) token batch; T is L - context_len."""
    labels = np.arange(vocab_size, dtype=np.int64)
    return _count_green(np.atleast_2d(tokens), key, gamma, labels, vocab_size)


def detect_kgw(tokens, key: WatermarkKey, gamma: float, vocab_size: int,
               fpr_levels=(0.01,)) -> DetectionReport:
    """Score positions >= context_len by recomputing green membership.

    The first context_len positions have no full in-sequence context and are
    left unscored; the p-value is the right binomial tail at the configured
    gamma.
    """
    tokens = np.asarray(tokens)
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise ValueError("token id out of range")
    n_green = int(count_green_kgw(tokens, key, gamma, vocab_size)[0])
    trials = tokens.shape[-1] - key.context_len
    return detection_report(trials, n_green, gamma, fpr_levels)


# ---------------------------------------------------------------------------
# Cluster-level partition


@dataclass(frozen=True)
class ClusterAssignment:
    """Token -> cluster id map; every cluster in [0, n_clusters) is non-empty."""

    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", lab)
        if lab.ndim != 1:
            raise ValueError("labels must be 1-D")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if lab.min() < 0 or lab.max() >= self.n_clusters:
            raise ValueError("cluster id out of range")
        if np.unique(lab).size != self.n_clusters:
            raise ValueError("every cluster must be non-empty")


def _kmeanspp_init(v: np.ndarray, n_clusters: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ seeding: first center uniform, rest D^2-weighted."""
    centers = np.empty((n_clusters, v.shape[1]))
    centers[0] = v[rng.integers(v.shape[0])]
    d2 = np.sum((v - centers[0]) ** 2, axis=1)
    for c in range(1, n_clusters):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(v.shape[0],
                                                           1.0 / v.shape[0])
        centers[c] = v[rng.choice(v.shape[0], p=probs)]
        d2 = np.minimum(d2, np.sum((v - centers[c]) ** 2, axis=1))
    return centers


def cluster_codebook(codebook: Codebook, n_clusters: int, seed: int = 0,
                     max_iter: int = 100, tol: float = 1e-9) -> ClusterAssignment:
    """Lloyd k-means over codebook vectors with seeded k-means++ init.

    Ties in assignment go to the lower cluster id. A cluster that empties is
    re-seeded to the point farthest from its current center (processed in
    ascending cluster id), keeping every cluster non-empty. Stops when
    centers move less than tol or after max_iter sweeps.
    """
    v = codebook.vectors
    if not 2 <= n_clusters <= codebook.size:
        raise ValueError("n_clusters must be in [2, codebook size]")
    rng = np.random.Generator(np.random.Philox(key=seed ^ 0x5EED))
    centers = _kmeanspp_init(v, n_clusters, rng)
    labels = np.zeros(codebook.size, dtype=np.int64)
    for _ in range(max_iter):
        d2 = (np.sum(v ** 2, axis=1)[:, None] - 2.0 * v @ centers.T
              + np.sum(centers ** 2, axis=1))
        labels = np.argmin(d2, axis=1)
        for c in range(n_clusters):
            if not np.any(labels == c):
                far = int(np.argmax(d2[np.arange(v.shape[0]), labels]))
                labels[far] = c
        new_centers = np.stack([v[labels == c].mean(axis=0)
                                for c in range(n_clusters)])
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        if shift < tol:
            break
    return ClusterAssignment(labels=labels, n_clusters=n_clusters)


def embed_clustermark_batch(model: ToyARModel, key: WatermarkKey, gamma: float,
                            delta: float, length: int, rng_seeds,
                            clusters: ClusterAssignment) -> np.ndarray:
    if clusters.labels.shape[0] != model.vocab_size:
        raise ValueError("cluster table size must equal vocab_size")
    bias = (key, gamma, delta, clusters.labels, clusters.n_clusters)
    return _ancestral_sample(model, length, np.asarray(rng_seeds), bias=bias)


def embed_clustermark(model: ToyARModel, key: WatermarkKey, gamma: float,
                      delta: float, length: int, rng_seed: int,
                      clusters: ClusterAssignment) -> np.ndarray:
    """Green/red partition drawn over cluster ids; tokens inherit cluster color.

    With n_clusters == vocab_size and the identity assignment this reduces
    exactly to the raw-token scheme.
    """
    return embed_clustermark_batch(model, key, gamma, delta, length,
                                   [rng_seed], clusters)[0]


def count_green_clustermark(tokens, key: WatermarkKey, gamma: float,
                            clusters: ClusterAssignment) -> np.ndarray:
    return _count_green(np.atleast_2d(tokens), key, gamma, clusters.labels,
                        clusters.n_clusters)


def detect_clustermark(tokens, key: WatermarkKey, gamma: float,
                       clusters: ClusterAssignment,
                       fpr_levels=(0.01,)) -> DetectionReport:
    """detect_kgw lifted to cluster ids: context and membership both use labels."""
    tokens = np.asarray(tokens)
    if tokens.min() < 0 or tokens.max() >= clusters.labels.shape[0]:
        raise ValueError("token id out of range")
    n_green = int(count_green_clustermark(tokens, key, gamma, clusters)[0])
    trials = tokens.shape[-1] - key.context_len
    return detection_report(trials, n_green, gamma, fpr_levels)


# ---------------------------------------------------------------------------
# Pairing scheme


@dataclass(frozen=True)
class TokenPairing:
    """Greedy matching of similar codewords plus a keyed green designation.

    partner[i] is i's pair (or -1 for the leftover of an odd vocabulary);
    green[i] says whether i is the green member of its pair. Exactly one of
    (i, partner[i]) is green.
    """

    partner: np.ndarray
    green: np.ndarray
    key: int = 0

    def __post_init__(self):
        partner = np.asarray(self.partner, dtype=np.int64)
        green = np.asarray(self.green, dtype=bool)
        object.__setattr__(self, "partner", partner)
        object.__setattr__(self, "green", green)
        if partner.shape != green.shape or partner.ndim != 1:
            raise ValueError("partner and green must be matching 1-D arrays")
        for i, j in enumerate(partner):
            if j >= 0 and (partner[j] != i or green[i] == green[j]):
                raise ValueError("pairing must be an involution with one green member")


def build_pairing(codebook: Codebook, key: int = 0) -> TokenPairing:
    """Repeatedly pair the globally closest unpaired codewords.

    Candidate pairs are ordered by (squared distance, i, j), so ties break
    toward the lowest index pair and the result is deterministic. The green
    member of pair (i, j), i < j, is i when the low bit of
    mix64(mix64(key) XOR mix64(i) XOR mix64(j)) is 0, else j. An odd
    vocabulary leaves one unpaired vector (partner -1, never scored).
    """
    v = codebook.vectors
    n = codebook.size
    d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
    iu, ju = np.triu_indices(n, k=1)
    order = np.lexsort((ju, iu, d2[iu, ju]))
    partner = np.full(n, -1, dtype=np.int64)
    for idx in order:
        i, j = int(iu[idx]), int(ju[idx])
        if partner[i] < 0 and partner[j] < 0:
            partner[i], partner[j] = j, i
    green = np.zeros(n, dtype=bool)
    for i in range(n):
        j = partner[i]
        if j > i:
            bit = mix64(mix64(key) ^ mix64(i) ^ mix64(j)) & 1
            green[i if bit == 0 else j] = True
    return TokenPairing(partner=partner, green=green, key=key)


def embed_indexmark(tokens: np.ndarray, pairing: TokenPairing) -> np.ndarray:
    """Replace every red token with its green partner, leftovers untouched.

    Post-generation rewrite: unlike the logit-bias schemes this edits an
    already sampled map, so it composes with any sampler.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.min() < 0 or tokens.max() >= pairing.partner.shape[0]:
        raise ValueError("token id out of range")
    to_green = np.arange(pairing.partner.shape[0], dtype=np.int64)
    red = (~pairing.green) & (pairing.partner >= 0)
    to_green[red] = pairing.partner[red]
    return to_green[tokens]


def detect_indexmark(tokens, pairing: TokenPairing,
                     fpr_levels=(0.01,)) -> DetectionReport:
    """Count green members among paired tokens against a Bin(T, 1/2) null.

    The null is invented (tokens are not exactly fair coins under the toy
    model), so empirical thresholds via stats.tpr_at_fpr remain available
    where calibration matters; leftover tokens are excluded from T.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.min() < 0 or tokens.max() >= pairing.partner.shape[0]:
        raise ValueError("token id out of range")
    paired = pairing.partner[tokens] >= 0
    trials = int(paired.sum())
    if trials == 0:
        raise ValueError("no paired tokens to score")
    n_green = int(np.count_nonzero(pairing.green[tokens] & paired))
    return detection_report(trials, n_green, 0.5, fpr_levels)
