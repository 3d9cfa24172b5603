"""Bitwise multi-scale watermarking on residual pyramids.

A latent is decomposed scale by scale: downsample the running residual,
binarize it to sign times a per-scale constant, upsample and subtract. The
bit sequence of each scale (channel index varying fastest) carries the mark;
generation biases each bit toward completing a green n-gram with its
predecessors, detection recomputes the bits from a re-encoded image and
counts green n-grams per scale against an exact binomial null. N-grams never
straddle a scale boundary, and the first l bits of each scale are unscored
on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .core import DetectionReport, bilinear_resize, stream_draw
from .stats import detection_report
from .toyvae import EncoderProfile, encode

__all__ = [
    "ScaleSchedule",
    "GreenNGramSet",
    "ALTERNATING_GREEN",
    "ToyBitModel",
    "default_scale_constants",
    "ResidualPyramid",
    "residual_decompose",
    "bits_unfold",
    "bits_fold",
    "count_green_ngrams",
    "sample_bitmark",
    "detect_bits",
    "detect_bitmark",
]


@dataclass(frozen=True)
class ScaleSchedule:
    """Spatial sizes (h_i, w_i) per scale, coarse to fine, nondecreasing.

    The final entry must match the latent resolution it is applied to.
    """

    sizes: tuple

    def __post_init__(self):
        sizes = tuple((int(h), int(w)) for h, w in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes:
            raise ValueError("schedule needs at least one scale")
        prev = (1, 1)
        for h, w in sizes:
            if h < 1 or w < 1:
                raise ValueError("scale sizes must be >= 1")
            if h < prev[0] or w < prev[1]:
                raise ValueError("scale sizes must be nondecreasing")
            prev = (h, w)

    @property
    def n_scales(self) -> int:
        return len(self.sizes)

    def check_latent(self, latent: np.ndarray) -> None:
        if latent.ndim != 3:
            raise ValueError("latent must have shape (d, h, w)")
        if latent.shape[1:] != self.sizes[-1]:
            raise ValueError(
                f"latent spatial size {latent.shape[1:]} does not match "
                f"final scale {self.sizes[-1]}")


def default_scale_constants(n_scales: int) -> tuple:
    """s_i = 2^-i for scales i = 1..n (coarse to fine)."""
    return tuple(2.0 ** -(i + 1) for i in range(n_scales))


@dataclass(frozen=True)
class GreenNGramSet:
    """Set of green bit n-grams, all of one length l+1.

    A window (b_{j-l}, ..., b_j) is green when it is in the set. The exact
    null probability of a green window under fair coin bits is
    |G| / 2^(l+1), exposed as null_gamma.
    """

    ngrams: tuple

    def __post_init__(self):
        grams = tuple(tuple(int(b) for b in g) for g in self.ngrams)
        object.__setattr__(self, "ngrams", grams)
        if not grams:
            raise ValueError("green set must be non-empty")
        width = len(grams[0])
        if width < 2:
            raise ValueError("n-grams must have length >= 2")
        for g in grams:
            if len(g) != width or any(b not in (0, 1) for b in g):
                raise ValueError("n-grams must be equal-length bit tuples")
        if len(set(grams)) != len(grams):
            raise ValueError("duplicate n-gram")
        if len(grams) >= 2 ** width:
            raise ValueError("green set must be a proper subset")

    @property
    def context_len(self) -> int:
        return len(self.ngrams[0]) - 1

    @property
    def null_gamma(self) -> float:
        return len(self.ngrams) / 2.0 ** len(self.ngrams[0])

    def member_table(self) -> np.ndarray:
        """Bool table indexed by the window code (first bit most significant)."""
        width = len(self.ngrams[0])
        table = np.zeros(2 ** width, dtype=bool)
        for g in self.ngrams:
            code = 0
            for b in g:
                code = (code << 1) | b
            table[code] = True
        return table

    def bias_for(self, context: tuple) -> tuple:
        """(bit0 is green, bit1 is green) given the l previous bits."""
        table = self.member_table()
        c0 = 0
        for b in context:
            c0 = (c0 << 1) | int(b)
        return bool(table[c0 << 1]), bool(table[(c0 << 1) | 1])


ALTERNATING_GREEN = GreenNGramSet(ngrams=((0, 1), (1, 0)))


@dataclass(frozen=True)
class ToyBitModel:
    """Base sampler for bits: logit_one is the unbiased log-odds of a 1 bit."""

    logit_one: float = 0.0


def _sign_pm(x: np.ndarray) -> np.ndarray:
    # binarizer used everywhere: strictly positive -> +1, else -1 (ties down)
    return np.where(x > 0.0, 1.0, -1.0)


def bits_unfold(u: np.ndarray) -> np.ndarray:
    """(d, h, w) quantized residual -> flat bit sequence, channel fastest."""
    return (np.moveaxis(u, 0, -1).reshape(-1) > 0.0)


def bits_fold(bits: np.ndarray, channels: int, h: int, w: int,
              scale_constant: float) -> np.ndarray:
    """Inverse of bits_unfold: bits -> (d, h, w) values +-scale_constant."""
    bits = np.asarray(bits, dtype=bool)
    if bits.size != channels * h * w:
        raise ValueError("bit count does not match (d, h, w)")
    arr = np.where(bits, scale_constant, -scale_constant).reshape(h, w, channels)
    return np.ascontiguousarray(np.moveaxis(arr, -1, 0))


def _resolve_constants(schedule: ScaleSchedule, scale_constants) -> tuple:
    if scale_constants is None:
        return default_scale_constants(schedule.n_scales)
    consts = tuple(float(s) for s in scale_constants)
    if len(consts) != schedule.n_scales:
        raise ValueError("need one scale constant per scale")
    if any(s <= 0 for s in consts):
        raise ValueError("scale constants must be positive")
    return consts


@dataclass(frozen=True)
class ResidualPyramid:
    """Per-scale decomposition products.

    e_tilde[i] is the downsampled running residual before binarization,
    u[i] the quantized residual (+-s_i), bits[i] its unfolded bit sequence.
    reconstruction + final_residual equals the input latent exactly.
    """

    e_tilde: tuple
    u: tuple
    bits: tuple
    final_residual: np.ndarray
    reconstruction: np.ndarray
    constants: tuple


def residual_decompose(latent: np.ndarray, schedule: ScaleSchedule,
                       scale_constants=None) -> ResidualPyramid:
    """Coarse-to-fine residual binarization of a latent.

    At scale i the running residual is resampled to (h_i, w_i), binarized to
    sign times s_i (zeros count as negative), upsampled back and subtracted.
    The final scale has the latent's own size, so its resample is the
    identity.
    """
    latent = np.asarray(latent, dtype=np.float64)
    schedule.check_latent(latent)
    consts = _resolve_constants(schedule, scale_constants)
    h_out, w_out = schedule.sizes[-1]
    acc = latent.copy()
    e_list, u_list, bit_list = [], [], []
    for (h, w), s in zip(schedule.sizes, consts):
        e = bilinear_resize(acc, h, w)
        u = s * _sign_pm(e)
        acc = acc - bilinear_resize(u, h_out, w_out)
        e_list.append(e)
        u_list.append(u)
        bit_list.append(bits_unfold(u))
    return ResidualPyramid(e_tilde=tuple(e_list), u=tuple(u_list),
                           bits=tuple(bit_list), final_residual=acc,
                           reconstruction=latent - acc, constants=consts)


def count_green_ngrams(bits: np.ndarray, green: GreenNGramSet):
    """(trials, hits) over the sliding windows of one scale's bit sequence."""
    bits = np.asarray(bits, dtype=np.int64)
    l = green.context_len
    trials = max(0, bits.size - l)
    if trials == 0:
        return 0, 0
    codes = np.zeros(trials, dtype=np.int64)
    for k in range(l + 1):
        codes = (codes << 1) | bits[k:k + trials]
    return trials, int(np.count_nonzero(green.member_table()[codes]))


def sample_bitmark(model: ToyBitModel, green: GreenNGramSet, delta: float,
                   schedule: ScaleSchedule, channels: int, rng_seed: int,
                   scale_constants=None):
    """Sample biased bits scale by scale and assemble the watermarked latent.

    Each bit's logits get +delta on the value that completes a green n-gram
    with the l previously sampled bits of the same scale; the first l bits of
    a scale are sampled without bias (their context would cross a scale
    boundary). Returns (latent, bits) with bits a tuple of per-scale arrays;
    the latent is the sum of the upsampled quantized residuals, so
    residual_decompose recovers the bits whenever the scale constants give
    sign margins (see the round-trip tests).
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if channels < 1:
        raise ValueError("channels must be >= 1")
    consts = _resolve_constants(schedule, scale_constants)
    l = green.context_len
    table = green.member_table()
    h_out, w_out = schedule.sizes[-1]
    latent = np.zeros((channels, h_out, w_out))
    counter = 0
    all_bits = []
    for (h, w), s in zip(schedule.sizes, consts):
        n = channels * h * w
        bits = np.zeros(n, dtype=bool)
        ctx_code = 0
        for j in range(n):
            logit0, logit1 = 0.0, model.logit_one
            if j >= l:
                logit0 += delta * float(table[ctx_code << 1])
                logit1 += delta * float(table[(ctx_code << 1) | 1])
            p_one = 1.0 / (1.0 + math.exp(logit0 - logit1))
            u = stream_draw(rng_seed, counter) * 2.0 ** -64
            counter += 1
            bit = u < p_one
            bits[j] = bit
            ctx_code = ((ctx_code << 1) | int(bit)) & ((1 << l) - 1)
        all_bits.append(bits)
        latent += bilinear_resize(bits_fold(bits, channels, h, w, s),
                                  h_out, w_out)
    return latent, tuple(all_bits)


def detect_bits(bits_per_scale, green: GreenNGramSet,
                fpr_levels=(0.01,)) -> DetectionReport:
    """Score per-scale bit sequences: pooled exact binomial right tail.

    The null hit probability is green.null_gamma; per_scale rows carry
    (scale, trials, hits, green-minus-red surplus) so scale-resolved
    diagnostics survive into the report.
    """
    rows = []
    total_t, total_n = 0, 0
    for i, bits in enumerate(bits_per_scale):
        t, n = count_green_ngrams(bits, green)
        rows.append((i, t, n, 2 * n - t))
        total_t += t
        total_n += n
    if total_t == 0:
        raise ValueError("no scored n-grams; sequences shorter than context")
    return detection_report(total_t, total_n, green.null_gamma, fpr_levels,
                            per_scale=rows)


def detect_bitmark(image: np.ndarray, profile: EncoderProfile,
                   schedule: ScaleSchedule, green: GreenNGramSet,
                   scale_constants=None, fpr_levels=(0.01,)) -> DetectionReport:
    """Re-encode an image, decompose the latent, and score its bits."""
    pyramid = residual_decompose(encode(image, profile), schedule,
                                 scale_constants)
    return detect_bits(pyramid.bits, green, fpr_levels)
