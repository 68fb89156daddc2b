import json
import os

import numpy as np
import pytest

from lorap import cli, graphs, training
from lorap.errors import ConfigError


def test_parse_config_empty_gives_defaults():
    cfg = cli.parse_config("")
    assert cfg == training.TrainConfig()


def test_parse_config_file_and_override():
    cfg = cli.parse_config("k = 40\n# comment\nr = 4\n", {"r": 2})
    assert cfg.k == 40 and cfg.r == 2


def test_parse_config_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        cli.parse_config("bogus = 1\n")


def test_parse_config_type_error():
    with pytest.raises(ConfigError, match="epochs"):
        cli.parse_config("epochs = soon\n")


def test_parse_config_clip_percentile_none():
    cfg = cli.parse_config("clip_percentile = none\n")
    assert cfg.clip_percentile is None
    cfg = cli.parse_config("clip_percentile = 0.99\n")
    assert cfg.clip_percentile == 0.99


def test_manifest_roundtrip(tmp_path):
    cfg = training.TrainConfig(k=7, r=2, seed=3)
    path = cli.write_manifest(str(tmp_path), cfg, {}, 0.0)
    assert cli.load_manifest_config(path) == cfg


FAST = ["--epochs", "5", "--hidden", "8", "--patience", "10"]


def test_cli_train_and_eval(tmp_path):
    out = str(tmp_path / "run")
    rc = cli.main(["train", "--out", out, "--seed", "1"] + FAST)
    assert rc == 0
    assert os.path.isfile(os.path.join(out, "metrics.tsv"))
    assert os.path.isfile(os.path.join(out, "loss_curve.png"))
    assert os.path.isfile(os.path.join(out, "manifest.json"))
    rc = cli.main(["eval", "--model", os.path.join(out, "model.lmd"),
                   "--split", "test"])
    assert rc == 0


def test_cli_train_deterministic(tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = str(tmp_path / tag)
        assert cli.main(["train", "--out", out, "--seed", "5"] + FAST) == 0
        with open(os.path.join(out, "metrics.tsv")) as fh:
            rows = training.read_report(fh)
        # train_s is wall-clock and legitimately varies between runs
        outs.append([{k: v for k, v in r.items() if k != "train_s"}
                     for r in rows])
    assert outs[0] == outs[1]


def test_cli_sweep(tmp_path):
    out = str(tmp_path / "sweep")
    rc = cli.main(["sweep", "--out", out, "--k-grid", "2,4", "--r-grid", "1",
                   "--seeds", "0", "--framework", "qat", "--prompt-mode",
                   "lorap"] + FAST)
    assert rc == 0
    with open(os.path.join(out, "sweep.tsv")) as fh:
        rows = training.read_report(fh)
    assert len(rows) == 2
    assert os.path.isfile(os.path.join(out, "sweep_heatmap.png"))


def test_cli_bench(tmp_path):
    out = str(tmp_path / "bench")
    rc = cli.main(["bench", "--out", out, "--n", "2000", "--d", "16",
                   "--k", "4", "--r", "2", "--reps", "30", "--warmup", "3"])
    assert rc == 0
    assert os.path.isfile(os.path.join(out, "bench.tsv"))
    assert os.path.isfile(os.path.join(out, "bench_bars.png"))


def test_cli_verify(capsys):
    rc = cli.main(["verify"])
    out = capsys.readouterr().out
    assert rc == 0
    assert out.count("PASS") >= 4
    assert "FAIL" not in out


def test_cli_convert_loadback(tmp_path):
    content = tmp_path / "toy.content"
    cites = tmp_path / "toy.cites"
    rng = np.random.default_rng(0)
    lines = []
    for i in range(120):
        feats = " ".join(str(v) for v in rng.integers(0, 2, 8))
        lines.append(f"id{i} {feats} c{i % 2}")
    content.write_text("\n".join(lines) + "\n")
    cites.write_text("\n".join(f"id{i} id{(i * 7 + 1) % 120}" for i in range(240)) + "\n")
    cache = str(tmp_path / "toy.lrg")
    assert cli.main(["convert", str(content), str(cites), "--out", cache]) == 0
    with open(cache, "rb") as fh:
        ds = graphs.load_cache(fh)
    assert ds.graph.num_nodes == 120
    assert ds.features.shape == (120, 8)
    # cache usable by train
    rc = cli.main(["train", "--data", cache, "--out", str(tmp_path / "run"),
                   "--epochs", "2", "--hidden", "4"])
    assert rc == 0


def test_cli_usage_error_exit_2():
    assert cli.main(["frobnicate"]) == 2
    assert cli.main([]) == 2


def test_cli_domain_error_exit_1(tmp_path):
    missing = str(tmp_path / "nope.lmd")
    assert cli.main(["eval", "--model", missing]) == 1


def test_cli_config_file(tmp_path):
    cfgf = tmp_path / "c.cfg"
    cfgf.write_text("k = 4\nr = 2\nepochs = 3\nhidden = 8\nframework = qat\n"
                    "prompt_mode = lorap\n")
    out = str(tmp_path / "run")
    assert cli.main(["train", "--config", str(cfgf), "--out", out]) == 0
    with open(os.path.join(out, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["config"]["k"] == 4
    assert manifest["config"]["framework"] == "qat"


def test_manifest_reproduces_run(tmp_path):
    out1 = str(tmp_path / "one")
    assert cli.main(["train", "--out", out1, "--seed", "2"] + FAST) == 0
    cfg = cli.load_manifest_config(os.path.join(out1, "manifest.json"))
    ds = cli._fixture()
    _, m = training.train(cfg, ds)
    with open(os.path.join(out1, "metrics.tsv")) as fh:
        rows = training.read_report(fh)
    assert rows[0]["test_acc"] == pytest.approx(m.test_acc, abs=1e-4)
