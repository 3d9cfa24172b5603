"""Removal and forgery attacks against the toy schemes.

All optimization attacks take sign-of-gradient steps under an exact L-inf
budget: after every step the perturbation is projected back into the budget
ball and the pixels are clamped to [0, 1] (gradients are taken before the
clamp). Budget invariants are asserted every step; a violation raises rather
than silently degrading, since the evaluation criteria hinge on exactness.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .bitmark import (GreenNGramSet, ScaleSchedule, ALTERNATING_GREEN,
                      detect_bits, residual_decompose)
from .core import bilinear_resize, bilinear_resize_adjoint, validate_image
from .stats import psnr
from .toyvae import EncoderProfile, decode, encode, encode_pullback, lookup, quantize

__all__ = [
    "OptBudget",
    "AttackResult",
    "vq_regen",
    "latentopt_removal",
    "latentopt_forgery",
    "find_flip_targets",
    "bitopt_removal",
    "FreqInjectConfig",
    "setting",
    "area_scaled",
    "plan_injection_bins",
    "inject_spectrum",
    "freq_inject",
    "average_corpus",
    "PERTURB_KINDS",
    "perturb",
]


# ---------------------------------------------------------------------------
# Regeneration


def vq_regen(image: np.ndarray, profile: EncoderProfile, k: int = 1) -> np.ndarray:
    """Re-encode, requantize each cell to its k-th nearest codeword, decode.

    k = 1 is plain reconstruction; k = 2 moves every cell to the runner-up
    codeword, which for a twin-paired codebook is exactly the cell's pairing
    partner. k must lie in [1, codebook size].
    """
    validate_image(image)
    if not 1 <= k <= profile.codebook.size:
        raise ValueError(f"k must be in [1, {profile.codebook.size}]")
    _, ranking = quantize(encode(image, profile), profile.codebook)
    return decode(lookup(ranking[..., k - 1], profile.codebook), profile)


# ---------------------------------------------------------------------------
# Latent-space optimization


@dataclass(frozen=True)
class OptBudget:
    """Sign-step PGD parameters: L-inf radius c, step alpha, step count,
    verification cadence. alpha defaults to c / 100."""

    c: float = 8.0 / 255.0
    alpha: float = None
    steps: int = 300
    verify_every: int = 10

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("budget c must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.verify_every < 1:
            raise ValueError("verify_every must be >= 1")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.c / 100.0)
        elif self.alpha <= 0 and self.c > 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class AttackResult:
    """Attacked image, per-checkpoint trace rows, and the step chosen.

    Trace rows are (step, loss, linf, psnr, p); p is NaN when no verifier
    was supplied.
    """

    image: np.ndarray
    trace: tuple
    chosen_step: int


def _assert_budget(delta: np.ndarray, x0: np.ndarray, c: float) -> None:
    x = x0 + delta
    if float(np.max(np.abs(delta))) > c:
        raise RuntimeError("budget invariant violated: |delta|_inf > c")
    if float(x.min()) < 0.0 or float(x.max()) > 1.0:
        raise RuntimeError("budget invariant violated: pixels left [0, 1]")


def _project(delta: np.ndarray, x0: np.ndarray, c: float) -> np.ndarray:
    # order matters: ball projection first, then the pixel clamp, so the
    # returned delta satisfies both exactly
    delta = np.clip(delta, -c, c)
    return np.clip(delta, -x0, 1.0 - x0)


def _pgd(x0: np.ndarray, profile: EncoderProfile, z_ref: np.ndarray,
         budget: OptBudget, maximize: bool, verifier, init_delta):
    """Shared PGD core: walk ||encode(x0 + delta) - z_ref||^2 up or down.

    Checkpoints every verify_every steps (plus the final step); when a
    verifier callback is given, the checkpoint with the weakest detection
    (max p) is returned for removal runs and the strongest (min p) for
    forgery runs, ties to the earliest step. Without a verifier the final
    iterate wins.
    """
    c = budget.c
    delta = _project(init_delta, x0, c)
    trace = []
    best = None  # (p, step, image)
    sign = 1.0 if maximize else -1.0
    last_loss = math.nan
    for step in range(1, budget.steps + 1):
        x = x0 + delta
        z = encode(x, profile)
        diff = z - z_ref
        last_loss = float(np.sum(diff * diff))
        grad = encode_pullback(x, profile, 2.0 * diff)
        delta = _project(delta + sign * budget.alpha * np.sign(grad), x0, c)
        _assert_budget(delta, x0, c)
        if step % budget.verify_every == 0 or step == budget.steps:
            x_now = x0 + delta
            p = float(verifier(x_now)) if verifier is not None else math.nan
            trace.append((step, last_loss, float(np.max(np.abs(delta))),
                          psnr(x_now, x0), p))
            if verifier is not None:
                better = (best is None
                          or (maximize and p > best[0])
                          or (not maximize and p < best[0]))
                if better:
                    best = (p, step, x_now.copy())
    if verifier is None or best is None:
        return AttackResult(image=x0 + delta, trace=tuple(trace),
                            chosen_step=budget.steps)
    return AttackResult(image=best[2], trace=tuple(trace), chosen_step=best[1])


def latentopt_removal(image: np.ndarray, profile: EncoderProfile,
                      budget: OptBudget = OptBudget(), verifier=None,
                      rng_seed: int = 0) -> AttackResult:
    """Push the latent away from its own encoding under an L-inf budget.

    Maximizes ||E(x + delta) - E(x)||^2 by sign-step ascent. The start point
    is a seeded uniform draw inside the ball (the gradient vanishes at
    delta = 0). verifier, if given, maps an image to a detection p-value and
    selects the kept checkpoint; budget c = 0 returns the input unchanged.
    """
    x0 = validate_image(image).copy()
    if budget.c == 0.0:
        return AttackResult(image=x0, trace=(), chosen_step=0)
    rng = np.random.Generator(np.random.Philox(key=rng_seed))
    init = rng.uniform(-budget.c, budget.c, size=x0.shape)
    return _pgd(x0, profile, encode(x0, profile), budget, maximize=True,
                verifier=verifier, init_delta=init)


def latentopt_forgery(cover: np.ndarray, watermarked: np.ndarray,
                      profile: EncoderProfile, budget: OptBudget = OptBudget(),
                      verifier=None) -> AttackResult:
    """Pull a cover's latent toward a watermarked image's latent.

    Minimizes ||E(x_c + delta) - E(x_w)||^2 from delta = 0 under the same
    projection discipline as removal; the checkpoint with the smallest
    verifier p-value is kept.
    """
    x0 = validate_image(cover).copy()
    target = encode(validate_image(watermarked), profile)
    if budget.c == 0.0:
        return AttackResult(image=x0, trace=(), chosen_step=0)
    return _pgd(x0, profile, target, budget, maximize=False,
                verifier=verifier, init_delta=np.zeros_like(x0))


# ---------------------------------------------------------------------------
# Bitwise attack


def find_flip_targets(bits: np.ndarray, green: GreenNGramSet) -> np.ndarray:
    """Interior positions whose trigram is 010 or 101: flipping the center
    destroys two green bigrams at once.

    Only meaningful against the alternating bigram green set; other green
    sets would need their own targeting rule, so anything else is rejected.
    """
    if set(green.ngrams) != set(ALTERNATING_GREEN.ngrams):
        raise ValueError("flip targeting assumes the alternating bigram green set")
    b = np.asarray(bits, dtype=np.int64)
    if b.size < 3:
        return np.empty(0, dtype=np.int64)
    centers = (b[:-2] == b[2:]) & (b[:-2] != b[1:-1])
    return np.nonzero(centers)[0] + 1


def bitopt_removal(image: np.ndarray, profile: EncoderProfile,
                   schedule: ScaleSchedule, green: GreenNGramSet,
                   scale_constants=None, epsilon: float = 2.5 / 255.0,
                   alpha: float = None, steps: int = 100,
                   target_scales=None, margin: float = None,
                   p_stop: float = 0.01) -> AttackResult:
    """Flip targeted fine-scale bits by pushing residuals past a sign margin.

    Per step: re-encode, decompose, verify (stop at the first p > p_stop);
    otherwise collect 010/101 trigram centers on the targeted scales and
    descend L = sum |e_i[j] + sign(e_i[j]) * margin| where e_i is the
    unquantized downsampled residual. Quantized values and the target set
    are treated as constants inside a step, so the gradient of each term is
    just sign(e_i[j]) pulled back through the fixed resize and the encoder.
    Projection and clamping follow the same exact discipline as the latent
    attacks. target_scales defaults to the finest scale; margin defaults to
    a quarter of the smallest targeted scale constant.
    """
    x0 = validate_image(image).copy()
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if alpha is None:
        alpha = epsilon / 20.0
    if target_scales is None:
        target_scales = (schedule.n_scales - 1,)
    target_scales = tuple(int(i) for i in target_scales)
    if any(not 0 <= i < schedule.n_scales for i in target_scales):
        raise ValueError("target scale index out of range")
    pyramid = residual_decompose(encode(x0, profile), schedule, scale_constants)
    if margin is None:
        margin = 0.25 * min(pyramid.constants[i] for i in target_scales)
    h_lat, w_lat = schedule.sizes[-1]
    delta = np.zeros_like(x0)
    trace = []
    stop_step = steps
    for step in range(1, steps + 1):
        x = x0 + delta
        z = encode(x, profile)
        pyramid = residual_decompose(z, schedule, scale_constants)
        report = detect_bits(pyramid.bits, green)
        if report.p > p_stop:
            stop_step = step - 1
            trace.append((step, 0.0, float(np.max(np.abs(delta))),
                          psnr(x, x0), report.p))
            break
        loss = 0.0
        grad_z = np.zeros_like(z)
        for i in target_scales:
            targets = find_flip_targets(pyramid.bits[i], green)
            if targets.size == 0:
                continue
            e_flat = np.moveaxis(pyramid.e_tilde[i], 0, -1).reshape(-1)
            vals = e_flat[targets]
            sg = np.where(vals > 0.0, 1.0, -1.0)
            loss += float(np.sum(np.abs(vals + sg * margin)))
            g_flat = np.zeros(e_flat.size)
            g_flat[targets] = sg
            d, h, w = pyramid.e_tilde[i].shape
            g_scale = np.moveaxis(g_flat.reshape(h, w, d), -1, 0)
            grad_z += bilinear_resize_adjoint(g_scale, h_lat, w_lat)
        grad_x = encode_pullback(x, profile, grad_z)
        delta = _project(delta - alpha * np.sign(grad_x), x0, epsilon)
        _assert_budget(delta, x0, epsilon)
        trace.append((step, loss, float(np.max(np.abs(delta))),
                      psnr(x0 + delta, x0), report.p))
    return AttackResult(image=x0 + delta, trace=tuple(trace),
                        chosen_step=stop_step)


# ---------------------------------------------------------------------------
# Frequency-domain forgery


@dataclass(frozen=True)
class FreqInjectConfig:
    """Diagonal lattice injection into the centered spectrum.

    Lattice points sit at (+-k*spacing, k*spacing) for k >= 1 in centered
    frequency coordinates, right half-plane only; each selected bin gains
    A = exp(ln_magnitude) * e^{i phi} with a fresh uniform phase per
    (channel, bin), and the Hermitian mirror bin gains conj(A), which keeps
    the pixel result real. max_bins limits k per diagonal (None = every bin
    inside the spectrum); overwrite replaces instead of adds.
    """

    spacing: int = 32
    ln_magnitude: float = 8.0
    max_bins: int = None
    overwrite: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.spacing < 1:
            raise ValueError("spacing must be >= 1")
        if self.max_bins is not None and self.max_bins < 1:
            raise ValueError("max_bins must be >= 1 or None")


_SETTINGS = {"A": (7.75, 4), "B": (8.0, 4), "C": (8.0, None)}


def setting(name: str, spacing: int = 32, seed: int = 0) -> FreqInjectConfig:
    """Named injection settings: A = (ln 7.75, 4 bins), B = (ln 8.0, 4 bins),
    C = (ln 8.0, all bins); magnitudes are calibrated for 1024 x 1024 covers."""
    if name not in _SETTINGS:
        raise ValueError(f"unknown setting {name!r}")
    ln_mag, max_bins = _SETTINGS[name]
    return FreqInjectConfig(spacing=spacing, ln_magnitude=ln_mag,
                            max_bins=max_bins, seed=seed)


def area_scaled(config: FreqInjectConfig, height: int, width: int,
                reference: int = 1024) -> FreqInjectConfig:
    """Rescale a config's magnitude to a different cover area.

    DFT magnitudes scale with pixel count for a fixed per-pixel effect, so
    the adjusted magnitude is ln_magnitude + ln(H*W / reference^2).
    """
    return FreqInjectConfig(
        spacing=config.spacing,
        ln_magnitude=config.ln_magnitude + math.log(height * width / reference ** 2),
        max_bins=config.max_bins, overwrite=config.overwrite, seed=config.seed)


def plan_injection_bins(height: int, width: int, config: FreqInjectConfig):
    """Resolve the lattice to unique unshifted bins.

    Returns (points, skipped): points are (fy, fx) integer frequencies in
    centered coordinates with duplicates (bins that alias to the same DFT
    index, e.g. the Nyquist diagonal) removed; skipped counts requested bins
    that fall outside the spectrum.
    """
    limit = min(height, width) // 2
    available = limit // config.spacing
    want = available if config.max_bins is None else config.max_bins
    points, seen = [], set()
    skipped = 0
    for k in range(1, want + 1):
        fx = k * config.spacing
        if fx > limit:
            skipped += 2
            continue
        for fy in (fx, -fx):
            idx = (fy % height, fx % width)
            if idx in seen:
                continue
            seen.add(idx)
            points.append((fy, fx))
    return points, skipped


def inject_spectrum(image: np.ndarray, config: FreqInjectConfig) -> np.ndarray:
    """Per-channel unshifted DFT of the image with the lattice injected.

    Phases are drawn channel-major then point-major from a seeded generator.
    Self-conjugate bins receive A + conj(A) (additive) or 2 Re(A)
    (overwrite), so Hermitian symmetry is preserved bin-exactly either way.
    """
    validate_image(image)
    h, w = image.shape[:2]
    points, _ = plan_injection_bins(h, w, config)
    spectra = np.stack([np.fft.fft2(image[..., c]) for c in range(3)], axis=-1)
    rng = np.random.Generator(np.random.Philox(key=config.seed))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(3, max(1, len(points))))
    amp = math.exp(config.ln_magnitude)
    for c in range(3):
        for n, (fy, fx) in enumerate(points):
            a = amp * np.exp(1j * phases[c, n])
            iy, ix = fy % h, fx % w
            my, mx = (-fy) % h, (-fx) % w
            if (iy, ix) == (my, mx):
                val = a + np.conj(a)
                if config.overwrite:
                    spectra[iy, ix, c] = val
                else:
                    spectra[iy, ix, c] += val
            elif config.overwrite:
                spectra[iy, ix, c] = a
                spectra[my, mx, c] = np.conj(a)
            else:
                spectra[iy, ix, c] += a
                spectra[my, mx, c] += np.conj(a)
    return spectra


def freq_inject(image: np.ndarray, config: FreqInjectConfig,
                clamp: bool = True) -> np.ndarray:
    """Inject the lattice and return the pixel image.

    The inverse transform is real up to float round-off by construction; the
    imaginary part is discarded and, unless clamp=False, the result is
    clipped to [0, 1].
    """
    spectra = inject_spectrum(image, config)
    out = np.stack([np.real(np.fft.ifft2(spectra[..., c])) for c in range(3)],
                   axis=-1)
    return np.clip(out, 0.0, 1.0) if clamp else out


# ---------------------------------------------------------------------------
# Steganalysis and classical perturbations


def average_corpus(images) -> np.ndarray:
    """Pixel mean of a corpus; systematic biases survive, content averages out."""
    total = None
    n = 0
    for img in images:
        validate_image(img)
        total = img.copy() if total is None else total + img
        n += 1
    if n == 0:
        raise ValueError("empty corpus")
    return total / n


PERTURB_KINDS = ("gauss-noise", "gauss-blur", "brightness", "contrast",
                 "dct-quantize", "rotate", "center-crop-resize", "hflip")


def _dct_quantize(image: np.ndarray, q: float) -> np.ndarray:
    h, w = image.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    hh, ww = x.shape[:2]
    blocks = x.reshape(hh // 8, 8, ww // 8, 8, 3)
    coef = dctn(blocks, axes=(1, 3), norm="ortho")
    coef = np.round(coef / q) * q
    out = idctn(coef, axes=(1, 3), norm="ortho").reshape(hh, ww, 3)
    return out[:h, :w]


def perturb(image: np.ndarray, kind: str, strength: float,
            seed: int = 0) -> np.ndarray:
    """Classical distortion baselines. strength 0 is the identity for every
    kind; unknown kinds raise ValueError.

    gauss-noise   additive N(0, strength^2), seeded
    gauss-blur    Gaussian blur, sigma = strength pixels
    brightness    add strength
    contrast      scale around mid-gray by (1 + strength)
    dct-quantize  8x8 blockwise DCT, coefficients rounded to multiples of strength
    rotate        strength degrees about the center, bilinear, edge fill
    center-crop-resize  crop the central (1 - strength) fraction, resize back
    hflip         horizontal mirror (any strength > 0)
    """
    x = validate_image(image)
    if kind not in PERTURB_KINDS:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    if strength < 0:
        raise ValueError("strength must be >= 0")
    if strength == 0.0:
        return x.copy()
    if kind == "gauss-noise":
        rng = np.random.Generator(np.random.Philox(key=seed))
        out = x + rng.normal(0.0, strength, size=x.shape)
    elif kind == "gauss-blur":
        out = ndimage.gaussian_filter(x, sigma=(strength, strength, 0.0),
                                      mode="nearest")
    elif kind == "brightness":
        out = x + strength
    elif kind == "contrast":
        out = (x - 0.5) * (1.0 + strength) + 0.5
    elif kind == "dct-quantize":
        out = _dct_quantize(x, strength)
    elif kind == "rotate":
        out = ndimage.rotate(x, angle=strength, axes=(1, 0), reshape=False,
                             order=1, mode="nearest")
    elif kind == "center-crop-resize":
        if strength >= 1.0:
            raise ValueError("crop fraction must be < 1")
        h, w = x.shape[:2]
        hk = max(1, round(h * (1.0 - strength)))
        wk = max(1, round(w * (1.0 - strength)))
        top, left = (h - hk) // 2, (w - wk) // 2
        crop = x[top:top + hk, left:left + wk]
        out = bilinear_resize(crop.transpose(2, 0, 1), h, w).transpose(1, 2, 0)
    else:  # hflip
        out = x[:, ::-1, :]
    return np.clip(out, 0.0, 1.0)
