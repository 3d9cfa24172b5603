"""Seeded toy VQ-VAE: patchwise encoders/decoders with closed-form gradients.

Two encoder families are provided. "linear-orthonormal" projects each patch
onto seeded orthonormal directions; its decoder is the adjoint, so
encode(decode(z)) == z exactly whenever the decoded pixels stay inside [0, 1].
"nonlinear" runs per-patch channel means through a seeded affine-tanh-affine
stack. Both expose encode_pullback, the exact reverse-mode gradient of encode,
which the optimization attacks consume.

Profiles are cheap to rebuild from (kind, patch, dim, seed) plus a codebook,
and that tuple is exactly what gets serialized.
"""

from __future__ import annotations

from dataclasses import dataclass
import json

import numpy as np

from .core import Codebook

__all__ = [
    "EncoderProfile",
    "build_codebook",
    "encode",
    "decode",
    "encode_pullback",
    "quantize",
    "lookup",
    "box_setting",
    "profile_to_json",
    "profile_from_json",
    "save_profile",
    "load_profile",
]

_KINDS = ("linear-orthonormal", "nonlinear")
_HIDDEN = 16  # width of the nonlinear profile's tanh layer
_BIAS = 0.5   # decoders emit around mid-gray so small latents stay in range

# Codebook geometry: anchors are rejection-sampled inside an L2 ball and each
# anchor spawns a twin pair at radius r in a seeded direction. Twins are each
# other's nearest neighbours by a strict margin (2*r_max < anchor floor / 2),
# which pins down both the greedy pairing and rank-2 regeneration behavior.
ANCHOR_RADIUS = 0.12
ANCHOR_MIN_DIST = 0.058
PAIR_RADIUS = (0.010, 0.013)
#: documented floor on the min pairwise codebook distance: 2 * min pair radius
CODEBOOK_DISTANCE_FLOOR = 2 * PAIR_RADIUS[0]
_REJECTION_BUDGET = 2000


def build_codebook(seed: int, size: int, dim: int) -> Codebook:
    """Seeded codebook of `size` vectors in R^dim.

    ceil(size/2) anchor points are drawn uniformly in the ball of radius
    ANCHOR_RADIUS with pairwise distance >= ANCHOR_MIN_DIST (rejection
    resampling; raises RuntimeError if the budget is exhausted). Each anchor
    emits two vectors at anchor +- r*u with r in PAIR_RADIUS and u a random
    unit vector; an odd size gets one unpaired vector from the last anchor.
    Min pairwise distance is therefore >= CODEBOOK_DISTANCE_FLOOR.
    """
    if size < 2:
        raise ValueError("size must be >= 2")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=seed))
    n_anchor = (size + 1) // 2
    anchors = np.empty((n_anchor, dim))
    placed = 0
    tries = 0
    while placed < n_anchor:
        cand = rng.normal(size=dim)
        cand *= ANCHOR_RADIUS * rng.uniform() ** (1.0 / dim) / np.linalg.norm(cand)
        if placed == 0 or np.min(np.linalg.norm(anchors[:placed] - cand, axis=1)) >= ANCHOR_MIN_DIST:
            anchors[placed] = cand
            placed += 1
            tries = 0
        else:
            tries += 1
            if tries > _REJECTION_BUDGET:
                raise RuntimeError(
                    f"could not place {n_anchor} anchors at min distance "
                    f"{ANCHOR_MIN_DIST} in dim {dim}; loosen the geometry")
    vectors = np.empty((size, dim))
    for i in range(n_anchor):
        u = rng.normal(size=dim)
        u /= np.linalg.norm(u)
        r = rng.uniform(*PAIR_RADIUS)
        vectors[2 * i] = anchors[i] - r * u
        if 2 * i + 1 < size:
            vectors[2 * i + 1] = anchors[i] + r * u
    return Codebook(vectors=vectors)


@dataclass(frozen=True)
class EncoderProfile:
    """One seeded toy autoencoder: kind, patch edge p, latent dim, seed, codebook.

    Weights are derived deterministically from the seed and rebuilt on
    construction; two profiles with equal (kind, patch, dim, seed) are
    functionally identical even across processes.
    """

    kind: str
    patch: int
    dim: int
    seed: int
    codebook: Codebook

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")
        pixels = 3 * self.patch * self.patch
        if not 1 <= self.dim <= pixels:
            raise ValueError(f"dim must be in [1, {pixels}] for patch {self.patch}")
        if self.codebook.dim != self.dim:
            raise ValueError("codebook dim does not match profile dim")
        object.__setattr__(self, "_weights", _build_weights(self))

    @property
    def pixels_per_patch(self) -> int:
        return 3 * self.patch * self.patch


def _build_weights(profile: EncoderProfile) -> dict:
    rng = np.random.Generator(np.random.Philox(key=profile.seed ^ 0xA5A5A5A5))
    n = profile.pixels_per_patch
    d = profile.dim
    if profile.kind == "linear-orthonormal":
        a = rng.normal(size=(n, d))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))  # canonical sign, QR is otherwise ambiguous
        return {"q": q}
    w1 = rng.normal(size=(_HIDDEN, 3)) * 1.5
    b1 = rng.normal(size=_HIDDEN) * 0.3
    w2 = rng.normal(size=(d, _HIDDEN)) * (0.8 / np.sqrt(_HIDDEN))
    b2 = rng.normal(size=d) * 0.05
    dec = rng.normal(size=(n, d)) * (0.25 / np.sqrt(d))
    return {"w1": w1, "b1": b1, "w2": w2, "b2": b2, "dec": dec}


def _to_patches(image: np.ndarray, p: int) -> np.ndarray:
    """(H, W, 3) -> (h, w, 3*p*p) patch vectors, row-major within the patch."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    hh, ww = image.shape[0], image.shape[1]
    if hh % p or ww % p:
        raise ValueError(f"image {hh}x{ww} not divisible into {p}x{p} patches")
    h, w = hh // p, ww // p
    x = image.reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(h, w, 3 * p * p)


def _from_patches(patches: np.ndarray, p: int) -> np.ndarray:
    h, w = patches.shape[0], patches.shape[1]
    x = patches.reshape(h, w, p, p, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(h * p, w * p, 3)


def encode(image: np.ndarray, profile: EncoderProfile) -> np.ndarray:
    """Image (H, W, 3) -> latent (dim, H/p, W/p). Deterministic."""
    patches = _to_patches(image, profile.patch)
    wts = profile._weights
    if profile.kind == "linear-orthonormal":
        z = (patches - _BIAS) @ wts["q"]
    else:
        p = profile.patch
        means = patches.reshape(*patches.shape[:2], p * p, 3).mean(axis=2)
        a1 = np.tanh(means @ wts["w1"].T + wts["b1"])
        z = a1 @ wts["w2"].T + wts["b2"]
    return np.ascontiguousarray(z.transpose(2, 0, 1))


def decode(latent: np.ndarray, profile: EncoderProfile) -> np.ndarray:
    """Latent (dim, h, w) -> image (h*p, w*p, 3), clamped to [0, 1].

    Affine before the clamp for both kinds; the linear-orthonormal decoder is
    the exact adjoint of its encoder.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3 or latent.shape[0] != profile.dim:
        raise ValueError(f"latent must have shape ({profile.dim}, h, w)")
    cells = latent.transpose(1, 2, 0)
    wts = profile._weights
    mat = wts["q"] if profile.kind == "linear-orthonormal" else wts["dec"]
    patches = cells @ mat.T + _BIAS
    return np.clip(_from_patches(patches, profile.patch), 0.0, 1.0)


def encode_pullback(image: np.ndarray, profile: EncoderProfile,
                    grad_latent: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of encode at `image`.

    Given dL/dz of shape (dim, h, w), returns dL/dimage of shape (H, W, 3).
    For the linear profile this is input-independent; for the nonlinear one
    it runs the chain rule through mean-pool, affine, tanh, affine.
    """
    grad_latent = np.asarray(grad_latent, dtype=np.float64)
    g_cells = grad_latent.transpose(1, 2, 0)  # (h, w, d)
    wts = profile._weights
    p = profile.patch
    if profile.kind == "linear-orthonormal":
        g_patches = g_cells @ wts["q"].T
        return _from_patches(g_patches, p)
    patches = _to_patches(image, p)
    means = patches.reshape(*patches.shape[:2], p * p, 3).mean(axis=2)
    u = means @ wts["w1"].T + wts["b1"]
    a1 = np.tanh(u)
    g_a1 = g_cells @ wts["w2"]
    g_u = g_a1 * (1.0 - a1 ** 2)
    g_means = g_u @ wts["w1"]  # (h, w, 3)
    g_patches = np.repeat(g_means[:, :, None, :] / (p * p), p * p, axis=2)
    return _from_patches(g_patches.reshape(*patches.shape[:2], 3 * p * p), p)


def quantize(latent: np.ndarray, codebook: Codebook):
    """Nearest-codeword assignment with full distance ranking.

    Returns (tokens, ranking): tokens is the (h, w) int64 map of nearest
    codeword indices, ranking the (h, w, V) argsort of squared Euclidean
    distance, ascending, ties broken toward the lower index. ranking[..., 0]
    equals tokens; the deeper columns feed rank-k regeneration.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3 or latent.shape[0] != codebook.dim:
        raise ValueError(f"latent must have shape ({codebook.dim}, h, w)")
    cells = latent.transpose(1, 2, 0)
    v = codebook.vectors
    d2 = (np.sum(cells ** 2, axis=-1)[..., None]
          - 2.0 * cells @ v.T + np.sum(v ** 2, axis=-1))
    ranking = np.argsort(d2, axis=-1, kind="stable").astype(np.int64)
    return ranking[..., 0].copy(), ranking


def lookup(tokens: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Token map (h, w) -> latent (dim, h, w) by table lookup."""
    tokens = np.asarray(tokens)
    if tokens.min() < 0 or tokens.max() >= codebook.size:
        raise ValueError("token index out of range")
    return np.ascontiguousarray(codebook.vectors[tokens].transpose(2, 0, 1))


def box_setting(verifier: EncoderProfile, attacker: EncoderProfile) -> str:
    """Classify attacker knowledge: white (same profile), grey (same family
    and shape, different seed), black (different kind or patch geometry)."""
    same_shape = (verifier.kind == attacker.kind
                  and verifier.patch == attacker.patch
                  and verifier.dim == attacker.dim)
    if same_shape and verifier.seed == attacker.seed:
        return "white"
    if same_shape:
        return "grey"
    return "black"


# ---------------------------------------------------------------------------
# Serialization: JSON of the defining tuple plus the codebook vectors.

_FORMAT = "vqmark-profile-v1"


def profile_to_json(profile: EncoderProfile) -> str:
    doc = {
        "format": _FORMAT,
        "kind": profile.kind,
        "patch": profile.patch,
        "dim": profile.dim,
        "seed": profile.seed,
        "codebook": [list(map(float, row)) for row in profile.codebook.vectors],
    }
    return json.dumps(doc)


def profile_from_json(text: str) -> EncoderProfile:
    doc = json.loads(text)
    if doc.get("format") != _FORMAT:
        raise ValueError(f"unknown profile format: {doc.get('format')!r}")
    return EncoderProfile(
        kind=doc["kind"], patch=int(doc["patch"]), dim=int(doc["dim"]),
        seed=int(doc["seed"]),
        codebook=Codebook(vectors=np.array(doc["codebook"], dtype=np.float64)),
    )


def save_profile(profile: EncoderProfile, path) -> None:
    with open(path, "w") as fh:
        fh.write(profile_to_json(profile))


def load_profile(path) -> EncoderProfile:
    with open(path) as fh:
        return profile_from_json(fh.read())
