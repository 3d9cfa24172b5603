"""Bitwise multi-scale watermark: residual pyramid, bit scoring, sampling.

The decomposition is its own oracle: reconstruction + final_residual must
equal the input latent to machine precision, and refolding each scale's bit
sequence must reproduce the quantized residual exactly. Green-bigram counts
are checked against a direct python loop over sliding windows.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqmark.bitmark import (ALTERNATING_GREEN, GreenNGramSet, ResidualPyramid,
                            ScaleSchedule, ToyBitModel, bits_fold,
                            bits_unfold, count_green_ngrams,
                            default_scale_constants, detect_bitmark,
                            detect_bits, residual_decompose, sample_bitmark)
from vqmark.core import bilinear_resize
from vqmark.stats import binom_p_right
from vqmark.toyvae import EncoderProfile, build_codebook, decode, encode

SCHEDULE = ScaleSchedule(sizes=((1, 1), (2, 2), (4, 4)))
CONSTANTS = (0.3, 0.06, 0.006)


# ---------------------------------------------------------------------------
# configuration objects


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScaleSchedule(sizes=())
    with pytest.raises(ValueError):
        ScaleSchedule(sizes=((2, 2), (1, 4)))  # shrinks
    with pytest.raises(ValueError):
        ScaleSchedule(sizes=((0, 1),))
    assert SCHEDULE.n_scales == 3
    with pytest.raises(ValueError):
        SCHEDULE.check_latent(np.zeros((2, 4, 5)))


def test_default_constants_halve_per_scale():
    assert default_scale_constants(3) == (0.5, 0.25, 0.125)


def test_green_ngram_set_validation():
    with pytest.raises(ValueError):
        GreenNGramSet(ngrams=((0, 1), (1, 0, 1)))  # ragged
    with pytest.raises(ValueError):
        GreenNGramSet(ngrams=((0,),))  # too short
    with pytest.raises(ValueError):
        GreenNGramSet(ngrams=((0, 2),))  # not a bit
    with pytest.raises(ValueError):
        GreenNGramSet(ngrams=((0, 0), (0, 1), (1, 0), (1, 1)))  # everything


def test_alternating_green_properties():
    assert ALTERNATING_GREEN.context_len == 1
    assert ALTERNATING_GREEN.null_gamma == 0.5
    table = ALTERNATING_GREEN.member_table()
    assert table.tolist() == [False, True, True, False]  # codes 00 01 10 11


# ---------------------------------------------------------------------------
# bit packing


def test_bits_unfold_is_channel_fastest():
    u = np.array([[[1.0, -1.0]],      # channel 0, positions (0,0) (0,1)
                  [[-1.0, 1.0]]])     # channel 1
    assert bits_unfold(u).tolist() == [1, 0, 0, 1]


def test_sign_convention_zero_counts_negative():
    u = np.array([[[0.0, 1e-300]]])
    assert bits_unfold(u).tolist() == [0, 1]


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.integers(1, 5),
       st.integers(1, 5))
@settings(max_examples=60, deadline=None)
def test_fold_inverts_unfold(seed, d, h, w):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=d * h * w)
    u = bits_fold(bits, d, h, w, 0.25)
    assert u.shape == (d, h, w)
    assert set(np.unique(u)) <= {-0.25, 0.25}
    assert np.array_equal(bits_unfold(u), bits)


# ---------------------------------------------------------------------------
# residual pyramid


def test_decompose_is_exact_additive_split():
    rng = np.random.default_rng(4)
    latent = rng.normal(0, 0.2, size=(3, 4, 4))
    pyr = residual_decompose(latent, SCHEDULE, CONSTANTS)
    assert np.allclose(pyr.reconstruction + pyr.final_residual, latent,
                       atol=1e-15)
    for u, s, bits, (h, w) in zip(pyr.u, CONSTANTS, pyr.bits, SCHEDULE.sizes):
        assert u.shape == (3, h, w)
        assert set(np.unique(np.abs(u))) == {s}
        assert np.array_equal(bits_fold(bits, 3, h, w, s), u)


def test_final_scale_residual_is_not_resampled():
    rng = np.random.default_rng(5)
    latent = rng.normal(0, 0.2, size=(2, 4, 4))
    pyr = residual_decompose(latent, SCHEDULE, CONSTANTS)
    coarse = sum(bilinear_resize(u, 4, 4) for u in pyr.u[:2])
    assert np.allclose(pyr.e_tilde[2], latent - coarse, atol=1e-15)


def test_decompose_rejects_mismatched_latent():
    with pytest.raises(ValueError):
        residual_decompose(np.zeros((2, 8, 8)), SCHEDULE, CONSTANTS)
    with pytest.raises(ValueError):
        residual_decompose(np.zeros((2, 4, 4)), SCHEDULE, (0.3, 0.06))


# ---------------------------------------------------------------------------
# counting


def test_count_green_matches_window_loop():
    rng = np.random.default_rng(9)
    bits = rng.integers(0, 2, size=301)
    trials, hits = count_green_ngrams(bits, ALTERNATING_GREEN)
    assert trials == 300
    want = sum(bits[i] != bits[i + 1] for i in range(300))
    assert hits == want


def test_first_context_bits_are_unscored():
    assert count_green_ngrams(np.array([1]), ALTERNATING_GREEN) == (0, 0)
    assert count_green_ngrams(np.array([1, 0]), ALTERNATING_GREEN) == (1, 1)


def test_trigram_counting():
    green = GreenNGramSet(ngrams=((1, 1, 1),))
    trials, hits = count_green_ngrams(np.array([1, 1, 1, 1, 0, 1]), green)
    assert trials == 4
    assert hits == 2  # windows starting at 0 and 1


# ---------------------------------------------------------------------------
# sampling and detection


@pytest.mark.parametrize("seed", range(8))
def test_sampled_latent_decomposes_to_sampled_bits(seed):
    latent, bits = sample_bitmark(ToyBitModel(), ALTERNATING_GREEN, 2.0,
                                  SCHEDULE, 3, seed,
                                  scale_constants=CONSTANTS)
    pyr = residual_decompose(latent, SCHEDULE, CONSTANTS)
    for got, want in zip(pyr.bits, bits):
        assert np.array_equal(got, want)


def test_green_bigram_fraction_closed_form():
    # delta on the green continuation of a fair bit: e^d / (e^d + 1)
    want = math.exp(2.0) / (math.exp(2.0) + 1.0)
    sched = ScaleSchedule(sizes=((4, 4), (8, 8), (16, 16)))
    trials = hits = 0
    for seed in range(6):
        _, bits = sample_bitmark(ToyBitModel(), ALTERNATING_GREEN, 2.0,
                                 sched, 4, seed)
        for b in bits:
            t, h = count_green_ngrams(b, ALTERNATING_GREEN)
            trials += t
            hits += h
    assert hits / trials == pytest.approx(want, abs=0.02)


def test_unmarked_bits_follow_model_bias():
    _, bits = sample_bitmark(ToyBitModel(logit_one=3.0), ALTERNATING_GREEN,
                             0.0, ScaleSchedule(sizes=((16, 16),)), 4, 0)
    ones = np.concatenate(bits).mean()
    assert ones == pytest.approx(1 / (1 + math.exp(-3.0)), abs=0.03)


def test_detect_bits_pools_scales_at_null_gamma():
    rng = np.random.default_rng(2)
    per_scale = [rng.integers(0, 2, size=n) for n in (9, 33, 129)]
    rep = detect_bits(per_scale, ALTERNATING_GREEN, fpr_levels=(0.01,))
    want_t = want_n = 0
    for b in per_scale:
        t, n = count_green_ngrams(b, ALTERNATING_GREEN)
        want_t += t
        want_n += n
    assert rep.trials == want_t == 8 + 32 + 128
    assert rep.n_green == want_n
    assert rep.p == binom_p_right(want_t, want_n, 0.5)


def test_detect_bits_requires_scored_windows():
    with pytest.raises(ValueError):
        detect_bits([np.array([1])], ALTERNATING_GREEN)


def test_image_roundtrip_preserves_detection():
    profile = EncoderProfile(kind="linear-orthonormal", patch=8, dim=3,
                             seed=77, codebook=build_codebook(77, 32, 3))
    latent, bits = sample_bitmark(ToyBitModel(), ALTERNATING_GREEN, 2.0,
                                  SCHEDULE, 3, 123,
                                  scale_constants=CONSTANTS)
    image = decode(latent, profile)
    assert np.allclose(encode(image, profile), latent, atol=1e-9)  # no clip
    rep = detect_bitmark(image, profile, SCHEDULE, ALTERNATING_GREEN,
                         scale_constants=CONSTANTS)
    assert rep.p == detect_bits(bits, ALTERNATING_GREEN).p
