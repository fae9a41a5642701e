import csv
import io
import json

import numpy as np
import pytest

from fad import cli, config, harness
from fad.backbone import init_backbone, load_backbone
from fad.config import ConfigError, RunConfig

TINY = {
    "backbone": {"num_blocks": 2, "channels": [4, 6], "input_shape": [1, 16, 16]},
    "pretrain": {"epochs": 1, "batch_size": 8},
    "source": {"size": 16},
    "target": {"size": 16},
    "data": {"source_classes": 2, "source_per_class": 4, "target_classes": 6, "target_per_class": 12},
    "fad": {"k_high": 3},
    "sampler": {"way_max": 4, "query_per_class": 3},
    "stop": {"max_steps": 2},
    "episodes": 3,
}


@pytest.fixture
def tiny(tmp_path):
    d = json.loads(json.dumps(TINY))
    d["out_dir"] = str(tmp_path / "run")
    return config.from_dict(d)


@pytest.fixture
def tiny_file(tmp_path, tiny):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny.to_dict()))
    return path


# ------------------------------------------------------------------ config


def test_defaults_materialized(tmp_path):
    path = config.write_resolved(RunConfig(), tmp_path)
    data = json.loads(path.read_text())
    assert data["fad"] == {"r1": 0.3, "r2": 0.5, "k_low": 3, "k_mid": 3, "k_high": 5, "use_bias": False}
    assert data["stop"]["max_steps"] == 40 and data["optimizer"]["rho"] == 0.9
    assert config.from_dict(data) == RunConfig()


@pytest.mark.parametrize("bad", [
    {"nope": 1},
    {"fad": {"r3": 0.1}},
    {"fad": {"k_low": "three"}},
    {"episodes": 2.5},
    {"fad": 3},
    {"fad": {"use_bias": 1}},
])
def test_rejects_bad_documents(bad):
    with pytest.raises(ConfigError):
        config.from_dict(bad)


def test_partial_sections_merge():
    cfg = config.from_dict({"fad": {"k_high": 3}, "target": {"noise": 0.0}})
    assert cfg.fad.k_high == 3 and cfg.fad.r1 == 0.3
    assert cfg.target.noise == 0.0 and cfg.target.class_offset == 1000


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "bad.json")


@pytest.mark.parametrize("patch", [
    {"variant": "Conv"}, {"insertion_mask": [True]}, {"episodes": 0},
    {"fad": {"k_mid": 2}}, {"fad": {"r1": 0.6}}, {"sampler": {"mode": "x"}},
    {"stop": {"max_steps": 0}}, {"backbone": {"channels": [4]}},
])
def test_validate_semantic_errors(patch):
    with pytest.raises(ConfigError):
        harness.validate(config.from_dict(patch))


# ------------------------------------------------------------------ ablation grids


def test_ablation_cells_layout():
    cfg = RunConfig()
    assert [c.label for c in harness.ablation_cells("components", cfg)] == \
        ["#1 none", "#2 Linear1x1", "#3 BandwiseSpatial", "#4 FAD"]
    kernels = harness.ablation_cells("kernels", cfg)
    assert [c.label for c in kernels] == ["{1,1,1}", "{3,3,3}", "{3,3,5}", "{5,3,3}"]
    assert [(c.fad.k_high, c.fad.k_mid, c.fad.k_low) for c in kernels] == [(1, 1, 1), (3, 3, 3), (3, 3, 5), (5, 3, 3)]
    grid = [(c.fad.thresholds.r1, c.fad.thresholds.r2) for c in harness.ablation_cells("thresholds", cfg)]
    assert grid == [(0.1, 0.5), (0.2, 0.5), (0.3, 0.5), (0.4, 0.5), (0.3, 0.4), (0.3, 0.5), (0.3, 0.6), (0.3, 0.7)]
    blocks = harness.ablation_cells("blocks", cfg)
    assert [c.label for c in blocks] == ["block1", "block2", "block3", "block4", "all"]
    assert blocks[2].mask == (False, False, True, False) and blocks[-1].mask == (True,) * 4
    with pytest.raises(ConfigError):
        harness.ablation_cells("depth", cfg)


# ------------------------------------------------------------------ commands


def test_pretrain_checkpoint(tiny):
    res = harness.cmd_pretrain(tiny)
    back = load_backbone(res["checkpoint"])
    again = load_backbone(harness.cmd_pretrain(tiny)["checkpoint"])
    assert all(np.array_equal(a, b) for a, b in zip(back.arrays(), again.arrays()))
    assert json.loads((harness.checkpoint_path(tiny).parent / "resolved_config.json").read_text())["episodes"] == 3


def test_pretrain_zero_epochs_equals_init(tiny):
    tiny.pretrain.epochs = 0
    back = load_backbone(harness.cmd_pretrain(tiny)["checkpoint"])
    init = init_backbone(harness.backbone_config(tiny), tiny.pretrain.seed)
    assert all(np.array_equal(a, b) for a, b in zip(back.arrays(), init.arrays()))


def test_adapt_outputs_and_replay(tiny):
    harness.cmd_pretrain(tiny)
    res = harness.cmd_adapt(tiny)
    assert len(res["episodes"]) == 3 and len(res["rows"]) == 1
    out = harness.checkpoint_path(tiny).parent
    first = (out / "adapt_episodes.csv").read_bytes(), (out / "adapt_summary.csv").read_bytes()
    harness.cmd_adapt(tiny)
    assert ((out / "adapt_episodes.csv").read_bytes(), (out / "adapt_summary.csv").read_bytes()) == first
    assert len((out / "adapt_episodes.csv").read_text().splitlines()) == 4
    row = json.loads((out / "adapt.json").read_text())["rows"][0]
    assert row["n"] == 3 and [e["episode"] for e in row["episodes"]] == [0, 1, 2]


def test_variants_share_episode_seeds(tiny):
    harness.cmd_pretrain(tiny)
    recs = {}
    for variant in ("Linear1x1", "FAD"):
        tiny.variant = variant
        recs[variant] = [(e["episode"], e["seed"], e["way"]) for e in harness.cmd_adapt(tiny)["episodes"]]
    assert recs["Linear1x1"] == recs["FAD"]


def test_adapt_missing_checkpoint(tiny):
    with pytest.raises(FileNotFoundError):
        harness.cmd_adapt(tiny)


def test_ablate_writes_grid(tiny):
    harness.cmd_pretrain(tiny)
    tiny.episodes = 1
    harness.cmd_ablate(tiny, "thresholds")
    text = (harness.checkpoint_path(tiny).parent / "ablate_thresholds_summary.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    assert [(r["r1"], r["r2"]) for r in rows] == [
        ("0.1", "0.5"), ("0.2", "0.5"), ("0.3", "0.5"), ("0.4", "0.5"),
        ("0.3", "0.4"), ("0.3", "0.5"), ("0.3", "0.6"), ("0.3", "0.7")]


def test_worker_pool_matches_serial(tiny, monkeypatch):
    harness.cmd_pretrain(tiny)
    serial = harness.run_cells(tiny, harness.ablation_cells("components", tiny)[2:])
    monkeypatch.setenv("FAD_THREADS", "2")
    pooled = harness.run_cells(tiny, harness.ablation_cells("components", tiny)[2:])
    assert harness.episodes_csv(serial) == harness.episodes_csv(pooled)


def test_workers_env(monkeypatch):
    monkeypatch.setenv("FAD_THREADS", "junk")
    assert harness.workers() == 1
    monkeypatch.setenv("FAD_THREADS", "3")
    assert harness.workers() == 3


# ------------------------------------------------------------------ CLI


def test_cli_pipeline(tiny_file, tmp_path, capsys):
    out = str(tmp_path / "cli")
    assert cli.main(["pretrain", "--config", str(tiny_file), "--out", out, "--epochs", "1"]) == 0
    assert cli.main(["adapt", "--config", str(tiny_file), "--out", out, "--episodes", "2",
                     "--variant", "Linear1x1", "--lr", "2.0", "--seed", "4"]) == 0
    resolved = json.loads((tmp_path / "cli" / "resolved_config.json").read_text())
    assert (resolved["episodes"], resolved["variant"], resolved["optimizer"]["lr"], resolved["seed"]) == \
        (2, "Linear1x1", 2.0, 4)
    assert cli.main(["ablate", "--axis", "blocks", "--config", str(tiny_file), "--out", out, "--episodes", "1"]) == 0
    assert "all" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, tiny_file):
    bad = tmp_path / "bad.json"
    bad.write_text('{"bogus": 1}')
    assert cli.main(["adapt", "--config", str(bad)]) == 2
    assert cli.main(["adapt", "--config", str(tiny_file), "--out", str(tmp_path / "empty")]) == 1
    with pytest.raises(SystemExit):
        cli.main(["ablate", "--axis", "depth"])


def test_cli_gen_data(tiny_file, tmp_path):
    from fad.episodes import load_idx
    out = tmp_path / "gen"
    assert cli.main(["gen-data", "--config", str(tiny_file), "--out", str(out)]) == 0
    ds = load_idx(out / "target-images-idx3-ubyte", out / "target-labels-idx1-ubyte")
    assert ds.images.shape == (72, 1, 16, 16) and set(ds.labels.tolist()) == set(range(6))
    mapping = json.loads((out / "target-label-map.json").read_text())
    assert mapping["0"] == 1000


def test_cli_analyze_kernel(tmp_path, tiny_file, capsys):
    from fad.io import read_pgm
    out = tmp_path / "k"
    assert cli.main(["analyze-kernel", "--out", str(out), "--kernel-size", "1", "--grid", "8"]) == 0
    assert json.loads(capsys.readouterr().out)["spread"] <= 1e-12
    assert read_pgm(out / "transfer_magnitude.pgm").shape == (8, 8)
    run = tmp_path / "ck"
    cli.main(["pretrain", "--config", str(tiny_file), "--out", str(run)])
    assert cli.main(["analyze-kernel", "--out", str(out), "--checkpoint", str(run / "backbone.bin"),
                     "--block", "1", "--out-channel", "2", "--in-channel", "3"]) == 0
    assert len((out / "transfer_magnitude.csv").read_text().splitlines()) == 16
