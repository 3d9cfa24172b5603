"""Experiment orchestration: configs, toy worlds, and the command layer.

Everything here is deterministic given (config, run seed): per-item seeds are
derived by hashing (role tag, item index) with the run seed, so work items
can execute in any order or in parallel and still produce byte-identical
reports. Commands never print; they return summary dicts and leave files
under their output directory.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from concurrent.futures import ProcessPoolExecutor
import json
import math
import os
from pathlib import Path
import statistics

import numpy as np

from . import attacks as atk
from .bitmark import (GreenNGramSet, ScaleSchedule, ToyBitModel,
                      detect_bitmark, detect_bits, sample_bitmark)
from .core import WatermarkKey, bilinear_resize, context_hash
from .imageio import load_png, save_png
from .schemes import (ClusterAssignment, TokenPairing, ToyARModel,
                      build_pairing, cluster_codebook, detect_clustermark,
                      detect_indexmark, detect_kgw, embed_clustermark,
                      embed_indexmark, embed_kgw, sample_tokens)
from .stats import psnr, ssim, zscore
from .toyvae import (EncoderProfile, box_setting, build_codebook, decode,
                     encode, lookup, quantize)

__all__ = [
    "SCHEMES",
    "ExperimentConfig",
    "default_config",
    "World",
    "build_world",
    "attack_label",
    "generate_item",
    "synth_cover",
    "ingest_image",
    "detect_image",
    "detect_ground_truth",
    "apply_attack",
    "read_report",
    "cmd_generate",
    "cmd_attack",
    "cmd_detect",
    "cmd_eval",
    "cmd_avg",
    "cmd_inject",
]

SCHEMES = ("kgw", "clustermark", "indexmark", "bitmark")
SCHEMA_VERSION = 1

ROW_HEADER = "scheme,attack,box,index,trials,n_green,z,p,psnr,ssim"

# role tags folded into per-item seeds; values are arbitrary but frozen
_TAG_WATERMARK = 1
_TAG_CONTROL = 2
_TAG_ATTACK = 3
_TAG_COVER = 4

_ATTACK_NAMES = ("none", "control", "vq-regen", "latentopt", "bitopt", "perturb")
_BOXES = ("none", "white", "grey", "black")


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Toy-world description plus the attack matrix to run against it.

    The token schemes share one geometry (vocab 256, 8-dim codewords, 8 px
    patches, 16 x 16 latent grid); the bitwise scheme swaps in a 1-channel
    latent and a residual scale schedule. Attack entries are dicts with a
    "name" key and per-attack parameters; their labels must be unique since
    they key resumable report rows.
    """

    scheme: str = "kgw"
    image_size: int = 128
    patch: int = 8
    latent_dim: int = 8
    vocab_size: int = 256
    encoder_kind: str = "linear-orthonormal"
    codebook_seed: int = 101
    encoder_seed: int = 7
    attacker_encoder_seed: int = 8
    model_seed: int = 3
    key: int = 81761
    context_len: int = 1
    gamma: float = 0.25
    delta: float = 2.0
    n_clusters: int = 64
    cluster_seed: int = 5
    temperature: float = 1.0
    logit_scale: float = 1.0
    scale_sizes: tuple = ()
    scale_constants: tuple = ()
    green_ngrams: tuple = ((0, 1), (1, 0))
    bit_logit_one: float = 0.0
    count: int = 4
    fpr_levels: tuple = (0.01,)
    attacks: tuple = ()
    corpus_dir: str = ""
    inject_spacing: int = 40
    inject_ln_magnitude: float = 6.5
    inject_max_bins: int = None
    inject_overwrite: bool = False
    schema_version: int = 1

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unknown config schema version {self.schema_version}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.image_size % self.patch != 0:
            raise ValueError("image_size must be a multiple of patch")
        if not self.fpr_levels:
            raise ValueError("at least one FPR level required")
        object.__setattr__(self, "scale_sizes",
                           tuple((int(h), int(w)) for h, w in self.scale_sizes))
        object.__setattr__(self, "scale_constants",
                           tuple(float(s) for s in self.scale_constants))
        object.__setattr__(self, "green_ngrams",
                           tuple(tuple(int(b) for b in g) for g in self.green_ngrams))
        object.__setattr__(self, "fpr_levels",
                           tuple(float(x) for x in self.fpr_levels))
        object.__setattr__(self, "attacks",
                           tuple(dict(a) for a in self.attacks))
        seen = set()
        for spec in self.attacks:
            if spec.get("name") not in _ATTACK_NAMES:
                raise ValueError(f"unknown attack {spec.get('name')!r}")
            if spec.get("box", _default_box(spec["name"])) not in _BOXES:
                raise ValueError(f"unknown box {spec.get('box')!r}")
            label = attack_label(spec)
            if label in seen:
                raise ValueError(f"duplicate attack label {label!r}")
            seen.add(label)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def to_json(self) -> str:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["scale_sizes"] = [list(s) for s in self.scale_sizes]
        doc["green_ngrams"] = [list(g) for g in self.green_ngrams]
        doc["scale_constants"] = list(self.scale_constants)
        doc["fpr_levels"] = list(self.fpr_levels)
        doc["attacks"] = [dict(a) for a in self.attacks]
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        doc = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    def save(self, path) -> None:
        _atomic_write(Path(path), self.to_json())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


def _token_attacks() -> tuple:
    return (
        {"name": "none"},
        {"name": "control"},
        {"name": "vq-regen", "box": "white", "k": 1},
        {"name": "latentopt", "box": "white", "steps": 120},
        {"name": "perturb", "kind": "gauss-noise", "strength": 0.02},
        {"name": "perturb", "kind": "gauss-blur", "strength": 1.0},
        {"name": "perturb", "kind": "dct-quantize", "strength": 0.02},
        {"name": "perturb", "kind": "hflip", "strength": 1.0},
    )


def default_config(scheme: str = "kgw") -> ExperimentConfig:
    """Frozen toy defaults per scheme; see the class docstring for geometry."""
    if scheme in ("kgw", "indexmark"):
        return ExperimentConfig(scheme=scheme, attacks=_token_attacks())
    if scheme == "clustermark":
        return ExperimentConfig(scheme=scheme, delta=5.0,
                                attacks=_token_attacks())
    if scheme == "bitmark":
        return ExperimentConfig(
            scheme=scheme, latent_dim=1, delta=2.0,
            scale_sizes=((1, 1), (4, 4), (16, 16)),
            scale_constants=(0.3, 0.06, 0.006),
            attacks=(
                {"name": "none"},
                {"name": "control"},
                {"name": "vq-regen", "box": "white", "k": 1},
                {"name": "latentopt", "box": "white", "steps": 120},
                {"name": "bitopt", "box": "white"},
                {"name": "perturb", "kind": "gauss-noise", "strength": 0.02},
                {"name": "perturb", "kind": "hflip", "strength": 1.0},
            ))
    raise ValueError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# World construction


@dataclass(frozen=True)
class World:
    """Everything derived from a config: profiles, model, scheme tables."""

    config: ExperimentConfig
    profile: EncoderProfile
    grey_profile: EncoderProfile
    black_profile: EncoderProfile
    model: ToyARModel = None
    bit_model: ToyBitModel = None
    key: WatermarkKey = None
    clusters: ClusterAssignment = None
    pairing: TokenPairing = None
    schedule: ScaleSchedule = None
    green: GreenNGramSet = None

    def attacker_profile(self, box: str) -> EncoderProfile:
        return {"white": self.profile, "grey": self.grey_profile,
                "black": self.black_profile}[box]


def build_world(config: ExperimentConfig) -> World:
    cfg = config
    # the bitwise scheme never quantizes against the codebook; a 1-D book
    # only packs a few anchors under the pairing geometry, so keep it small
    book_size = 4 if cfg.scheme == "bitmark" else cfg.vocab_size
    codebook = build_codebook(cfg.codebook_seed, book_size, cfg.latent_dim)
    other_kind = ("nonlinear" if cfg.encoder_kind == "linear-orthonormal"
                  else "linear-orthonormal")
    profile = EncoderProfile(kind=cfg.encoder_kind, patch=cfg.patch,
                             dim=cfg.latent_dim, seed=cfg.encoder_seed,
                             codebook=codebook)
    grey = replace(profile, seed=cfg.attacker_encoder_seed)
    black = replace(profile, kind=other_kind, seed=cfg.attacker_encoder_seed)
    if box_setting(profile, grey) != "grey" or box_setting(profile, black) != "black":
        raise RuntimeError("attacker profiles inconsistent with box labels")
    key = WatermarkKey(key=cfg.key, context_len=cfg.context_len)
    kw = dict(config=cfg, profile=profile, grey_profile=grey,
              black_profile=black, key=key)
    if cfg.scheme == "bitmark":
        schedule = ScaleSchedule(sizes=cfg.scale_sizes)
        schedule.check_latent(np.zeros((cfg.latent_dim, cfg.grid, cfg.grid)))
        return World(bit_model=ToyBitModel(logit_one=cfg.bit_logit_one),
                     schedule=schedule,
                     green=GreenNGramSet(ngrams=cfg.green_ngrams), **kw)
    model = ToyARModel(seed=cfg.model_seed, vocab_size=cfg.vocab_size,
                       temperature=cfg.temperature, logit_scale=cfg.logit_scale)
    if cfg.scheme == "clustermark":
        clusters = cluster_codebook(codebook, cfg.n_clusters, seed=cfg.cluster_seed)
        return World(model=model, clusters=clusters, **kw)
    if cfg.scheme == "indexmark":
        return World(model=model, pairing=build_pairing(codebook, key=cfg.key), **kw)
    return World(model=model, **kw)


_WORLD_CACHE: dict = {}


def _cached_world(config_json: str) -> World:
    world = _WORLD_CACHE.get(config_json)
    if world is None:
        world = build_world(ExperimentConfig.from_json(config_json))
        _WORLD_CACHE[config_json] = world
    return world


def _child_seed(run_seed: int, tag: int, index: int) -> int:
    return context_hash((tag, index), run_seed)


def _attack_seed(run_seed: int, label: str, index: int) -> int:
    return context_hash((_TAG_ATTACK, index) + tuple(label.encode()), run_seed)


# ---------------------------------------------------------------------------
# Generation, covers, detection


def generate_item(world: World, run_seed: int, index: int,
                  watermarked: bool = True):
    """One toy image plus its ground-truth sidecar metadata.

    Controls (watermarked=False) run the same sampler without bias on an
    independent seed stream, so they are proper nulls rather than the same
    draw with the mark stripped.
    """
    cfg = world.config
    gen_seed = _child_seed(run_seed, _TAG_WATERMARK if watermarked else _TAG_CONTROL,
                           index)
    meta = {"schema_version": SCHEMA_VERSION, "scheme": cfg.scheme,
            "index": index, "watermarked": watermarked,
            "generator_seed": gen_seed, "key": cfg.key}
    if cfg.scheme == "bitmark":
        delta = cfg.delta if watermarked else 0.0
        latent, bits = sample_bitmark(world.bit_model, world.green, delta,
                                      world.schedule, cfg.latent_dim, gen_seed,
                                      cfg.scale_constants or None)
        image = decode(latent, world.profile)
        meta["bits"] = [b.astype(int).tolist() for b in bits]
        return image, meta
    length = cfg.grid * cfg.grid
    if not watermarked:
        tokens = sample_tokens(world.model, length, gen_seed)
    elif cfg.scheme == "kgw":
        tokens = embed_kgw(world.model, world.key, cfg.gamma, cfg.delta,
                           length, gen_seed)
    elif cfg.scheme == "clustermark":
        tokens = embed_clustermark(world.model, world.key, cfg.gamma, cfg.delta,
                                   length, gen_seed, world.clusters)
    else:
        tokens = embed_indexmark(sample_tokens(world.model, length, gen_seed),
                                 world.pairing)
    grid_tokens = tokens.reshape(cfg.grid, cfg.grid)
    image = decode(lookup(grid_tokens, world.profile.codebook), world.profile)
    meta["tokens"] = grid_tokens.tolist()
    return image, meta


def synth_cover(world: World, run_seed: int, index: int) -> np.ndarray:
    """Unwatermarked cover from the toy manifold.

    Token schemes decode a uniform random token map; the bitwise scheme
    decodes an unbiased bit-model sample. Both sit exactly on the latent
    manifold the verifier's residual machinery expects: the sign quantizers
    have no zero level, so an off-manifold smooth latent picks up a large
    systematic fine-scale residual that would swamp any forged pattern.
    """
    cfg = world.config
    seed = _child_seed(run_seed, _TAG_COVER, index)
    if cfg.scheme == "bitmark":
        latent, _ = sample_bitmark(world.bit_model, world.green, 0.0,
                                   world.schedule, cfg.latent_dim, seed,
                                   cfg.scale_constants or None)
    else:
        rng = np.random.Generator(np.random.Philox(key=seed))
        tokens = rng.integers(0, cfg.vocab_size, size=(cfg.grid, cfg.grid))
        latent = lookup(tokens, world.profile.codebook)
    return decode(latent, world.profile)


def ingest_image(path, size: int) -> np.ndarray:
    """Load a PNG, center-crop to square, resize to the working resolution."""
    img = load_png(path)
    h, w = img.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = img[top:top + side, left:left + side]
    if side == size:
        return img
    out = bilinear_resize(img.transpose(2, 0, 1), size, size).transpose(1, 2, 0)
    return np.clip(out, 0.0, 1.0)


def detect_image(world: World, image: np.ndarray):
    """Run the configured verifier on a pixel image."""
    cfg = world.config
    if cfg.scheme == "bitmark":
        return detect_bitmark(image, world.profile, world.schedule, world.green,
                              cfg.scale_constants or None, cfg.fpr_levels)
    tokens = quantize(encode(image, world.profile), world.profile.codebook)[0]
    flat = tokens.reshape(-1)
    if cfg.scheme == "kgw":
        return detect_kgw(flat, world.key, cfg.gamma, cfg.vocab_size,
                          cfg.fpr_levels)
    if cfg.scheme == "clustermark":
        return detect_clustermark(flat, world.key, cfg.gamma, world.clusters,
                                  cfg.fpr_levels)
    return detect_indexmark(flat, world.pairing, cfg.fpr_levels)


def detect_ground_truth(world: World, meta: dict):
    """Score the sidecar's stored tokens/bits, bypassing the pixel path."""
    cfg = world.config
    if cfg.scheme == "bitmark":
        bits = [np.array(b, dtype=bool) for b in meta["bits"]]
        return detect_bits(bits, world.green, cfg.fpr_levels)
    flat = np.array(meta["tokens"], dtype=np.int64).reshape(-1)
    if cfg.scheme == "kgw":
        return detect_kgw(flat, world.key, cfg.gamma, cfg.vocab_size,
                          cfg.fpr_levels)
    if cfg.scheme == "clustermark":
        return detect_clustermark(flat, world.key, cfg.gamma, world.clusters,
                                  cfg.fpr_levels)
    return detect_indexmark(flat, world.pairing, cfg.fpr_levels)


# ---------------------------------------------------------------------------
# Attack dispatch


def _default_box(name: str) -> str:
    if name in ("none", "control"):
        return "none"
    if name == "perturb":
        return "black"
    return "white"


def attack_label(spec: dict) -> str:
    """Unique row label: perturbations fold kind and strength into the name."""
    if spec["name"] == "perturb":
        return f"{spec['kind']}:{spec['strength']:g}"
    return spec["name"]


def apply_attack(world: World, spec: dict, image: np.ndarray, run_seed: int,
                 index: int):
    """Apply one attack entry; returns (image, box, trace rows).

    Trace rows are (step, loss, z, p, psnr); z comes from the verifier
    reports for latent optimization and is NaN for the bitwise attack, whose
    verification happens inside the optimizer.
    """
    name = spec["name"]
    box = spec.get("box", _default_box(name))
    label = attack_label(spec)
    seed = _attack_seed(run_seed, label, index)
    if name == "none":
        return image.copy(), box, ()
    if name == "perturb":
        return atk.perturb(image, spec["kind"], float(spec["strength"]),
                           seed=seed), box, ()
    profile = world.attacker_profile(box)
    if name == "vq-regen":
        return atk.vq_regen(image, profile, k=int(spec.get("k", 1))), box, ()
    if name == "latentopt":
        budget = atk.OptBudget(
            c=float(spec.get("c", 8.0 / 255.0)),
            alpha=spec.get("alpha"),
            steps=int(spec.get("steps", 300)),
            verify_every=int(spec.get("verify_every", 10)))
        reports = []

        def verifier(img):
            rep = detect_image(world, img)
            reports.append(rep)
            return rep.p

        res = atk.latentopt_removal(image, profile, budget, verifier, seed)
        trace = tuple((step, loss, reports[i].z, p, q)
                      for i, (step, loss, _, q, p) in enumerate(res.trace))
        return res.image, box, trace
    if name == "bitopt":
        if world.config.scheme != "bitmark":
            raise ValueError("bitopt only applies to the bitwise scheme")
        res = atk.bitopt_removal(
            image, profile, world.schedule, world.green,
            world.config.scale_constants or None,
            epsilon=float(spec.get("epsilon", 2.5 / 255.0)),
            alpha=spec.get("alpha"),
            steps=int(spec.get("steps", 100)),
            target_scales=spec.get("target_scales"),
            margin=spec.get("margin"),
            p_stop=float(spec.get("p_stop", 0.01)))
        trace = tuple((step, loss, math.nan, p, q)
                      for step, loss, _, q, p in res.trace)
        return res.image, box, trace
    raise ValueError(f"unknown attack {name!r}")


# ---------------------------------------------------------------------------
# Report plumbing


def _fmt(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".12g")


def _row_line(row: tuple) -> str:
    scheme, label, box, index, trials, n_green, z, p, q, s = row
    return (f"{scheme},{label},{box},{index},{trials},{n_green},"
            f"{_fmt(z)},{_fmt(p)},{_fmt(q)},{_fmt(s)}")


def _parse_rows(text: str):
    lines = text.strip().splitlines()
    if not lines or lines[0] != ROW_HEADER:
        raise ValueError("unrecognized rows file header")
    out = []
    for line in lines[1:]:
        f = line.split(",")
        if len(f) != 10:
            raise ValueError(f"malformed row: {line!r}")
        out.append((f[0], f[1], f[2], int(f[3]), int(f[4]), int(f[5]),
                    float(f[6]), float(f[7]), float(f[8]), float(f[9])))
    return out


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _null_gamma(world: World) -> float:
    cfg = world.config
    if cfg.scheme == "bitmark":
        return world.green.null_gamma
    if cfg.scheme == "indexmark":
        return 0.5
    return cfg.gamma


def _aggregate(world: World, rows, attack_order: dict) -> dict:
    """Aggregates recomputed from parsed rows; every row's z is re-derived
    from (trials, n_green) as a drift check before anything is emitted."""
    gamma = _null_gamma(world)
    for row in rows:
        expect = zscore(row[4], row[5], gamma)
        if not math.isclose(expect, row[6], rel_tol=1e-9, abs_tol=1e-9):
            raise RuntimeError(
                f"row z inconsistent with its counts: {row[1]} #{row[3]}")
    out = {}
    for label in sorted({r[1] for r in rows}, key=lambda l: attack_order[l]):
        sub = [r for r in rows if r[1] == label]
        ps = [r[7] for r in sub]
        qs = [r[8] for r in sub if not math.isnan(r[8])]
        ss = [r[9] for r in sub if not math.isnan(r[9])]
        out[label] = {
            "rows": len(sub),
            "box": sub[0][2],
            "tpr": {_fmt(lv): sum(p < lv for p in ps) / len(ps)
                    for lv in world.config.fpr_levels},
            "median_p": statistics.median(ps),
            "psnr_mean": statistics.mean(qs) if qs else None,
            "psnr_sd": statistics.pstdev(qs) if qs else None,
            "ssim_mean": statistics.mean(ss) if ss else None,
            "ssim_sd": statistics.pstdev(ss) if ss else None,
        }
    return out


def read_report(path) -> dict:
    """Load a JSON report, rejecting unknown schema versions."""
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unknown report schema version {doc.get('schema_version')}")
    return doc


def _write_report(path: Path, doc: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, **doc}
    _atomic_write(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Commands


def _generate_worker(args):
    config_json, run_seed, index, out_dir = args
    world = _cached_world(config_json)
    out = Path(out_dir)
    entries = []
    for watermarked, stem in ((True, f"item_{index:04d}"),
                              (False, f"control_{index:04d}")):
        image, meta = generate_item(world, run_seed, index, watermarked)
        meta["run_seed"] = run_seed
        meta["image"] = stem + ".png"
        meta["p_image"] = detect_image(world, image).p
        meta["p_ground_truth"] = detect_ground_truth(world, meta).p
        save_png(out / (stem + ".png"), image)
        _atomic_write(out / (stem + ".json"),
                      json.dumps(meta, sort_keys=True, indent=2) + "\n")
        entries.append(meta)
    return entries


def _pool_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=1))


def cmd_generate(config: ExperimentConfig, seed: int, out_dir, jobs: int = 1,
                 count: int = None) -> dict:
    """Emit count watermarked images + controls + ground-truth sidecars."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = config.count if count is None else count
    cj = config.to_json()
    results = _pool_map(_generate_worker,
                        [(cj, seed, i, str(out)) for i in range(n)], jobs)
    manifest = {
        "command": "generate", "run_seed": seed, "count": n,
        "config": json.loads(cj),
        "items": [m for pair in results for m in pair if m["watermarked"]],
        "controls": [m for pair in results for m in pair if not m["watermarked"]],
    }
    _write_report(out / "manifest.json", manifest)
    return manifest


def _load_corpus(config: ExperimentConfig):
    """Corpus images for attack/detect/avg: the config's corpus_dir if set
    (item_*.png, center-cropped and resized to the working resolution),
    otherwise None so callers synthesize."""
    if not config.corpus_dir:
        return None
    paths = sorted(Path(config.corpus_dir).glob("item_*.png"))
    if not paths:
        raise ValueError(f"no item_*.png under {config.corpus_dir}")
    return [(p, ingest_image(p, config.image_size)) for p in paths]


def cmd_attack(config: ExperimentConfig, seed: int, out_dir,
               jobs: int = 1) -> dict:
    """Apply every configured attack to the corpus (or freshly generated
    watermarked images), saving attacked PNGs and per-item trace CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(config)
    corpus = _load_corpus(config)
    if corpus is None:
        corpus = [(None, generate_item(world, seed, i)[0])
                  for i in range(config.count)]
    specs = [s for s in config.attacks if s["name"] not in ("none", "control")]
    entries = []
    for spec in specs:
        label = attack_label(spec)
        sub = out / label.replace(":", "_")
        sub.mkdir(exist_ok=True)
        for i, (_, image) in enumerate(corpus):
            attacked, box, trace = apply_attack(world, spec, image, seed, i)
            save_png(sub / f"item_{i:04d}.png", attacked)
            if trace:
                lines = ["step,loss,z,p,psnr"]
                lines += [f"{st},{_fmt(lo)},{_fmt(z)},{_fmt(p)},{_fmt(q)}"
                          for st, lo, z, p, q in trace]
                _atomic_write(sub / f"trace_{i:04d}.csv", "\n".join(lines) + "\n")
            entries.append({"attack": label, "box": box, "index": i,
                            "psnr": psnr(attacked, image)})
    report = {"command": "attack", "run_seed": seed, "count": len(corpus),
              "config": json.loads(config.to_json()), "items": entries}
    _write_report(out / "attack_manifest.json", report)
    return report


def cmd_detect(config: ExperimentConfig, seed: int, out_dir,
               image=None, sidecar=None) -> dict:
    """Verify a single image (with optional sidecar cross-check) or a corpus.

    Corpus mode scores every item_*.png under config.corpus_dir and writes
    rows.csv plus aggregates; psnr/ssim are NaN (no reference image exists
    on the pure detection path).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(config)
    if image is not None:
        img = ingest_image(image, config.image_size)
        rep = detect_image(world, img)
        doc = {"command": "detect", "image": str(image), "trials": rep.trials,
               "n_green": rep.n_green, "z": rep.z, "p": rep.p,
               "detected": {_fmt(lv): bool(d)
                            for lv, d in zip(config.fpr_levels, rep.detected_at)}}
        side = Path(sidecar) if sidecar else Path(image).with_suffix(".json")
        if side.exists():
            meta = json.loads(side.read_text())
            truth = detect_ground_truth(world, meta)
            doc["sidecar"] = {"p_ground_truth": truth.p,
                              "n_green_ground_truth": truth.n_green,
                              "matches_image_path": bool(truth.p == rep.p)}
        _write_report(out / "detect.json", doc)
        return doc
    corpus = _load_corpus(config)
    if corpus is None:
        raise ValueError("detect needs --image or a config corpus_dir")
    rows = []
    for i, (_, img) in enumerate(corpus):
        rep = detect_image(world, img)
        rows.append((config.scheme, "detect", "none", i, rep.trials,
                     rep.n_green, rep.z, rep.p, math.nan, math.nan))
    text = "\n".join([ROW_HEADER] + [_row_line(r) for r in rows]) + "\n"
    _atomic_write(out / "rows.csv", text)
    agg = _aggregate(world, _parse_rows(text), {"detect": 0})
    doc = {"command": "detect", "run_seed": seed, "count": len(rows),
           "config": json.loads(config.to_json()), "attacks": agg}
    _write_report(out / "summary.json", doc)
    return doc


def _eval_worker(args):
    config_json, run_seed, spec, index = args
    world = _cached_world(config_json)
    cfg = world.config
    label = attack_label(spec)
    if spec["name"] == "control":
        subject, _ = generate_item(world, run_seed, index, watermarked=False)
        reference = subject
        box = "none"
    else:
        watermarked, _ = generate_item(world, run_seed, index)
        subject, box, _ = apply_attack(world, spec, watermarked, run_seed, index)
        reference = watermarked
    rep = detect_image(world, subject)
    return (cfg.scheme, label, box, index, rep.trials, rep.n_green, rep.z,
            rep.p, psnr(subject, reference), ssim(subject, reference))


def cmd_eval(config: ExperimentConfig, seed: int, out_dir,
             jobs: int = 1) -> dict:
    """Full attack-matrix evaluation: resumable by (attack, index), byte-
    identical rows on re-run, aggregates recomputed from the emitted CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    order = {attack_label(s): i for i, s in enumerate(config.attacks)}
    done = {}
    rows_path = out / "rows.csv"
    if rows_path.exists():
        for row in _parse_rows(rows_path.read_text()):
            # rows from dropped attacks or beyond the current count are stale
            if row[1] in order and row[3] < config.count:
                done[(row[1], row[3])] = row
    cj = config.to_json()
    todo = [(cj, seed, spec, i) for spec in config.attacks
            for i in range(config.count)
            if (attack_label(spec), i) not in done]
    for row in _pool_map(_eval_worker, todo, jobs):
        done[(row[1], row[3])] = row
    rows = sorted(done.values(), key=lambda r: (order[r[1]], r[3]))
    text = "\n".join([ROW_HEADER] + [_row_line(r) for r in rows]) + "\n"
    _atomic_write(rows_path, text)
    world = build_world(config)
    agg = _aggregate(world, _parse_rows(rows_path.read_text()), order)
    doc = {"command": "eval", "run_seed": seed, "count": config.count,
           "computed": len(todo), "config": json.loads(cj), "attacks": agg}
    _write_report(out / "summary.json", doc)
    return doc


def cmd_avg(config: ExperimentConfig, seed: int, out_dir) -> dict:
    """Mean image of a corpus (configured dir, else freshly generated
    watermarked images) plus the verifier's report on that mean."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(config)
    corpus = _load_corpus(config)
    if corpus is None:
        corpus = [(None, generate_item(world, seed, i)[0])
                  for i in range(config.count)]
    mean = atk.average_corpus(img for _, img in corpus)
    save_png(out / "mean.png", mean)
    rep = detect_image(world, mean)
    doc = {"command": "avg", "run_seed": seed, "count": len(corpus),
           "config": json.loads(config.to_json()),
           "mean": {"trials": rep.trials, "n_green": rep.n_green,
                    "z": rep.z, "p": rep.p}}
    _write_report(out / "avg.json", doc)
    return doc


def cmd_inject(config: ExperimentConfig, seed: int, out_dir) -> dict:
    """Spectral forgery over synthesized covers: injected PNGs, detection
    rows, and the bin plan (including how many requested bins fell outside
    the spectrum)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(config)

    def cover_fic(i: int) -> atk.FreqInjectConfig:
        # fresh phases per cover; a shared draw would make the whole corpus
        # succeed or fail together
        return atk.FreqInjectConfig(
            spacing=config.inject_spacing,
            ln_magnitude=config.inject_ln_magnitude,
            max_bins=config.inject_max_bins,
            overwrite=config.inject_overwrite,
            seed=_attack_seed(seed, "freq-inject", i))

    bins, skipped = atk.plan_injection_bins(config.image_size,
                                            config.image_size, cover_fic(0))
    rows, per_cover = [], []
    for i in range(config.count):
        cover = synth_cover(world, seed, i)
        forged = atk.freq_inject(cover, cover_fic(i))
        save_png(out / f"inject_{i:04d}.png", forged)
        rep = detect_image(world, forged)
        rows.append((config.scheme, "freq-inject", "black", i, rep.trials,
                     rep.n_green, rep.z, rep.p, psnr(forged, cover),
                     ssim(forged, cover)))
        per_cover.append({"index": i, "p": rep.p,
                          "per_scale": [list(map(int, r)) for r in rep.per_scale]})
    text = "\n".join([ROW_HEADER] + [_row_line(r) for r in rows]) + "\n"
    _atomic_write(out / "rows.csv", text)
    agg = _aggregate(world, _parse_rows(text), {"freq-inject": 0})
    doc = {"command": "inject", "run_seed": seed, "count": config.count,
           "config": json.loads(config.to_json()),
           "bins": [list(b) for b in bins], "skipped_bins": skipped,
           "attacks": agg, "per_cover": per_cover}
    _write_report(out / "inject.json", doc)
    return doc
