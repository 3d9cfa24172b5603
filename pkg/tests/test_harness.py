"""Experiment harness: configs, deterministic generation, reports, CLI.

File-producing commands run against tmp_path with small counts; byte-level
re-run identity is asserted on the emitted CSV itself.
"""

import json
import math

import numpy as np
import pytest

from vqmark.cli import main
from vqmark.core import validate_image
from vqmark.stats import zscore
from vqmark.harness import (ExperimentConfig, ROW_HEADER, SCHEMES, World,
                            _aggregate, attack_label, build_world, cmd_avg,
                            cmd_detect, cmd_eval, cmd_generate, cmd_inject,
                            default_config, detect_ground_truth, detect_image,
                            generate_item, ingest_image, read_report,
                            synth_cover)
from vqmark.imageio import load_png, save_png

SMALL_ATTACKS = (
    {"name": "none"},
    {"name": "control"},
    {"name": "vq-regen", "box": "white", "k": 1},
    {"name": "perturb", "kind": "hflip", "strength": 1.0},
)


def small_config(**kw):
    base = dict(scheme="kgw", image_size=32, count=2, attacks=SMALL_ATTACKS)
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# config serialization


@pytest.mark.parametrize("scheme", SCHEMES)
def test_default_configs_round_trip(scheme):
    cfg = default_config(scheme)
    clone = ExperimentConfig.from_json(cfg.to_json())
    assert clone.to_json() == cfg.to_json()
    assert cfg.grid == 16


def test_config_save_load(tmp_path):
    cfg = small_config()
    cfg.save(tmp_path / "cfg.json")
    assert ExperimentConfig.load(tmp_path / "cfg.json").to_json() == cfg.to_json()


def test_config_rejects_unknown_fields_and_versions():
    doc = json.loads(default_config("kgw").to_json())
    doc["frobnicate"] = 1
    with pytest.raises(ValueError):
        ExperimentConfig.from_json(json.dumps(doc))
    with pytest.raises(ValueError):
        ExperimentConfig(schema_version=99)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(scheme="md5")
    with pytest.raises(ValueError):
        ExperimentConfig(count=0)
    with pytest.raises(ValueError):
        ExperimentConfig(image_size=30, patch=8)
    with pytest.raises(ValueError):
        ExperimentConfig(attacks=({"name": "teleport"},))
    with pytest.raises(ValueError):
        ExperimentConfig(attacks=({"name": "vq-regen", "box": "beige"},))
    with pytest.raises(ValueError):
        ExperimentConfig(attacks=({"name": "none"}, {"name": "none"}))


def test_attack_labels_fold_perturb_parameters():
    assert attack_label({"name": "latentopt"}) == "latentopt"
    assert attack_label({"name": "perturb", "kind": "gauss-noise",
                         "strength": 0.02}) == "gauss-noise:0.02"
    cfg = ExperimentConfig(attacks=(
        {"name": "perturb", "kind": "gauss-noise", "strength": 0.01},
        {"name": "perturb", "kind": "gauss-noise", "strength": 0.02}))
    assert len(cfg.attacks) == 2


def test_bitopt_requires_the_bitwise_scheme():
    cfg = small_config(attacks=({"name": "bitopt", "box": "white"},))
    world = build_world(cfg)
    image = synth_cover(world, 0, 0)
    from vqmark.harness import apply_attack
    with pytest.raises(ValueError):
        apply_attack(world, cfg.attacks[0], image, 0, 0)


# ---------------------------------------------------------------------------
# deterministic generation and detection


@pytest.mark.parametrize("scheme", SCHEMES)
def test_generate_item_is_deterministic(scheme):
    world = build_world(default_config(scheme))
    img_a, meta_a = generate_item(world, 5, 0)
    img_b, meta_b = generate_item(world, 5, 0)
    assert np.array_equal(img_a, img_b)
    assert meta_a == meta_b
    img_c, _ = generate_item(world, 5, 1)
    assert not np.array_equal(img_a, img_c)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_pixel_and_ground_truth_paths_agree(scheme):
    world = build_world(default_config(scheme))
    image, meta = generate_item(world, 9, 0)
    assert detect_image(world, image).p == detect_ground_truth(world, meta).p
    control, cmeta = generate_item(world, 9, 0, watermarked=False)
    assert (detect_image(world, control).p
            == detect_ground_truth(world, cmeta).p)
    assert not np.array_equal(image, control)  # independent seed streams


@pytest.mark.parametrize("scheme", SCHEMES)
def test_synth_cover_is_a_valid_deterministic_image(scheme):
    world = build_world(default_config(scheme))
    a = synth_cover(world, 3, 0)
    validate_image(a)
    assert np.array_equal(a, synth_cover(world, 3, 0))
    assert not np.array_equal(a, synth_cover(world, 3, 1))


# ---------------------------------------------------------------------------
# commands


def test_cmd_generate_writes_reloadable_corpus(tmp_path):
    cfg = small_config()
    doc = cmd_generate(cfg, 11, tmp_path)
    assert len(doc["items"]) == 2 and len(doc["controls"]) == 2
    world = build_world(cfg)
    for meta in doc["items"] + doc["controls"]:
        reloaded = load_png(tmp_path / meta["image"])
        # u8 quantization must not move any token: exact p equality
        assert detect_image(world, reloaded).p == meta["p_image"]
        assert meta["p_image"] == meta["p_ground_truth"]
    manifest = read_report(tmp_path / "manifest.json")
    assert manifest["count"] == 2


def test_cmd_eval_reruns_byte_identically(tmp_path):
    cfg = small_config()
    doc = cmd_eval(cfg, 11, tmp_path)
    assert doc["computed"] == len(SMALL_ATTACKS) * 2
    first = (tmp_path / "rows.csv").read_bytes()
    doc = cmd_eval(cfg, 11, tmp_path)
    assert doc["computed"] == 0  # fully resumed
    assert (tmp_path / "rows.csv").read_bytes() == first


def test_cmd_eval_resumes_partial_rows(tmp_path):
    cfg = small_config()
    cmd_eval(cfg, 11, tmp_path)
    full = (tmp_path / "rows.csv").read_text()
    lines = full.splitlines()
    (tmp_path / "rows.csv").write_text("\n".join(lines[:4]) + "\n")
    doc = cmd_eval(cfg, 11, tmp_path)
    assert doc["computed"] == len(lines) - 1 - 3
    assert (tmp_path / "rows.csv").read_text() == full


def test_cmd_eval_drops_stale_rows(tmp_path):
    cmd_eval(small_config(), 11, tmp_path)
    slim = small_config(attacks=SMALL_ATTACKS[:2])
    cmd_eval(slim, 11, tmp_path)
    rows = (tmp_path / "rows.csv").read_text().splitlines()[1:]
    labels = {line.split(",")[1] for line in rows}
    assert labels == {"none", "control"}


def test_aggregate_catches_z_drift():
    world = build_world(small_config())
    good = (("kgw", "none", "none", 0, 15, 9, zscore(15, 9, 0.25), 0.01,
             math.nan, math.nan),)
    agg = _aggregate(world, good, {"none": 0})
    assert agg["none"]["rows"] == 1
    bad = (("kgw", "none", "none", 0, 15, 9, 1.234, 0.01, math.nan,
            math.nan),)
    with pytest.raises(RuntimeError):
        _aggregate(world, bad, {"none": 0})


def test_read_report_rejects_other_versions(tmp_path):
    path = tmp_path / "report.json"
    path.write_text(json.dumps({"schema_version": 99}))
    with pytest.raises(ValueError):
        read_report(path)


def test_cmd_detect_single_image_cross_checks_sidecar(tmp_path):
    cfg = small_config(count=1)
    cmd_generate(cfg, 4, tmp_path / "corpus")
    doc = cmd_detect(cfg, 4, tmp_path / "detect",
                     image=tmp_path / "corpus" / "item_0000.png")
    assert doc["sidecar"]["matches_image_path"] is True
    assert doc["trials"] > 0
    assert doc["p"] < 0.01  # the item really is watermarked


def test_cmd_detect_corpus_mode(tmp_path):
    cfg = small_config()
    cmd_generate(cfg, 6, tmp_path / "corpus")
    cfg2 = small_config(corpus_dir=str(tmp_path / "corpus"))
    doc = cmd_detect(cfg2, 6, tmp_path / "detect")
    assert doc["count"] == 2
    rows = (tmp_path / "detect" / "rows.csv").read_text().splitlines()
    assert rows[0] == ROW_HEADER
    assert len(rows) == 3
    assert doc["attacks"]["detect"]["tpr"]["0.01"] == 1.0


def test_cmd_avg_reports_on_the_mean(tmp_path):
    doc = cmd_avg(small_config(), 2, tmp_path)
    assert (tmp_path / "mean.png").exists()
    assert 0.0 <= doc["mean"]["p"] <= 1.0


def test_cmd_inject_emits_plan_and_rows(tmp_path):
    cfg = default_config("bitmark")
    cfg = ExperimentConfig.from_json(json.dumps(
        {**json.loads(cfg.to_json()), "count": 2}))
    doc = cmd_inject(cfg, 7, tmp_path)
    assert doc["bins"] == [[40, 40], [-40, 40]]
    assert doc["skipped_bins"] == 0
    assert len(doc["per_cover"]) == 2
    for entry in doc["per_cover"]:
        assert len(entry["per_scale"]) == 3
    assert (tmp_path / "rows.csv").exists()
    assert (tmp_path / "inject_0000.png").exists()


def test_ingest_image_center_crops_and_resizes(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(20, 12, 3))
    save_png(tmp_path / "x.png", img)
    out = ingest_image(tmp_path / "x.png", 8)
    assert out.shape == (8, 8, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------------------
# CLI


def test_cli_runs_generate_and_prints_brief(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    small_config().save(cfg_path)
    code = main(["generate", "--config", str(cfg_path), "--seed", "5",
                 "--out", str(tmp_path / "out")])
    assert code == 0
    brief = json.loads(capsys.readouterr().out)
    assert brief["command"] == "generate"
    assert brief["items"] == 2
    assert (tmp_path / "out" / "manifest.json").exists()


def test_cli_bad_inputs_exit_2(tmp_path, capsys):
    assert main(["eval", "--config", str(tmp_path / "missing.json")]) == 2
    assert "error:" in capsys.readouterr().err
    cfg_path = tmp_path / "cfg.json"
    small_config().save(cfg_path)
    assert main(["eval", "--config", str(cfg_path), "--jobs", "0"]) == 2
    with pytest.raises(SystemExit):
        main([])  # a subcommand is required
    with pytest.raises(SystemExit):
        main(["generate", "--seed", "-1"])
