"""CLI and config tests on a tiny synthetic MNIST-shaped dataset."""
from __future__ import annotations

import csv
import dataclasses
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from driftpatch import cli
from driftpatch import config as cfgmod
from driftpatch import streams as st


def _digits(n, rng):
    """28x28 u8 images where label k lights up rows 2k and 2k+1."""
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = rng.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)
    for i, k in enumerate(labels):
        images[i, 2 * k + 4: 2 * k + 6, :] = 255
    return images, labels


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(7)
    for prefix, n in (("train", 500), ("t10k", 100)):
        images, labels = _digits(n, rng)
        st.write_idx(images, labels, root / f"{prefix}-images-idx3-ubyte", root / f"{prefix}-labels-idx1-ubyte")
    return root


CONFIG = """
[data]
root = "{root}"

[[scenarios]]
name = "tiny_flip"
kind = "flip"
init = 200
total = 600
chunks = 8
change_points = [400]

[base]
epochs = 1
{base_extra}

[patch]
hidden = [16]

[run]
models = ["baseline", "incl_noEE"]
seeds = [0, 1]
out = "{out}"

[sweep]
layers = ["fc1", "fc2"]
architectures = ["8", "16x8"]
"""


@pytest.fixture
def make_config(tmp_path, data_dir, monkeypatch):
    monkeypatch.delenv(cfgmod.DATA_ENV, raising=False)

    def make(root=None, base_extra="", out=None, text=None):
        path = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*.toml')))}.toml"
        out = out or tmp_path / "out"
        path.write_text(text if text is not None else
                        CONFIG.format(root=root or data_dir, base_extra=base_extra, out=out))
        return str(path), Path(out)
    return make


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_dump_round_trip(make_config):
    path, _ = make_config()
    cfg = cfgmod.load(path)
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg
    text = cfgmod.dumps(cfg)
    assert "threshold = 0.5" in text and "recovery_mode" in text


def test_config_rejects_unknown_keys(make_config):
    path, _ = make_config()
    text = Path(path).read_text().replace("epochs = 1", "epochs = 1\nepoch = 3")
    with pytest.raises(cfgmod.ConfigError, match="unknown keys: epoch"):
        cfgmod.loads(text)
    with pytest.raises(cfgmod.ConfigError, match="unknown top-level"):
        cfgmod.loads(Path(path).read_text() + "\n[extras]\nx = 1\n")


@pytest.mark.parametrize("edit", [
    ('models = ["baseline", "incl_noEE"]', 'models = ["incl_sometimesEE"]'),
    ('seeds = [0, 1]', 'seeds = []'),
    ('kind = "flip"', 'kind = "spin"'),
    ("epochs = 1", 'epochs = "one"'),
    ("change_points = [400]", "change_points = []"),
])
def test_config_validation_errors(make_config, edit):
    path, _ = make_config()
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.loads(Path(path).read_text().replace(*edit))


def test_overrides_and_data_env(make_config, monkeypatch):
    path, _ = make_config()
    cfg = cfgmod.with_overrides(cfgmod.load(path), seed=5, out="/x", jobs=2, recovery_mode="predrift")
    assert cfg.run.seeds == [5] and cfg.run.out == "/x" and cfg.run.jobs == 2
    monkeypatch.setenv(cfgmod.DATA_ENV, "/elsewhere")
    assert str(cfg.data_root()) == "/elsewhere"


def test_preset_scenario_resolves(make_config):
    path, _ = make_config()
    text = Path(path).read_text().replace(
        'kind = "flip"\ninit = 200\ntotal = 600\nchunks = 8\nchange_points = [400]', 'preset = "mnist_flip"')
    spec = cfgmod.loads(text).scenarios[0].to_spec(3)
    assert spec == dataclasses.replace(st.preset("mnist_flip", 3), name="tiny_flip")
    # preset change points are absolute, so shrinking the stream under them is rejected
    with pytest.raises(cfgmod.ConfigError, match="change points"):
        cfgmod.loads(text.replace('preset = "mnist_flip"', 'preset = "mnist_flip"\ntotal = 600'))


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_bad_config_exits_1(make_config, capsys):
    path, _ = make_config(text="[[scenarios]]\nname = 3 = 4\n")
    assert cli.main(["gen-stream", "--config", path]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert cli.main(["run", "--config", "/no/such/config.toml"]) == cli.EXIT_CONFIG


def test_missing_data_exits_2(make_config, tmp_path, capsys):
    path, _ = make_config(root=tmp_path / "empty")
    assert cli.main(["gen-stream", "--config", path]) == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "data error" in err and "train-images-idx3-ubyte" in err


def test_report_without_results_exits_2(tmp_path):
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_DATA


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def test_gen_stream_is_reproducible(make_config, capsys):
    path, out = make_config()
    assert cli.main(["gen-stream", "--config", path]) == cli.EXIT_OK
    first = {p.name: p.read_bytes() for p in (out / "streams").glob("*.drft")}
    assert sorted(first) == ["tiny_flip__seed0.drft", "tiny_flip__seed1.drft"]
    assert "chunks=8 chunk_size=50 change_point_chunks=[4]" in capsys.readouterr().out
    assert cli.main(["gen-stream", "--config", path]) == cli.EXIT_OK
    assert {p.name: p.read_bytes() for p in (out / "streams").glob("*.drft")} == first
    stream = st.load_stream(out / "streams" / "tiny_flip__seed0.drft")
    assert len(stream.init_set) == 200 and stream.chunk_sizes == [50] * 8


def test_train_base_caches_and_force_retrains(make_config, capsys):
    path, out = make_config()
    assert cli.main(["train-base", "--config", path, "--seed", "0"]) == cli.EXIT_OK
    ckpt = out / "bases" / "tiny_flip__seed0.nnpk"
    assert ckpt.exists() and "held-out pre-drift accuracy" in capsys.readouterr().out
    stamp = ckpt.stat().st_mtime_ns
    assert cli.main(["train-base", "--config", path, "--seed", "0"]) == cli.EXIT_OK
    assert "using cached checkpoint" in capsys.readouterr().out
    assert ckpt.stat().st_mtime_ns == stamp
    assert cli.main(["train-base", "--config", path, "--seed", "0", "--force"]) == cli.EXIT_OK
    assert "using cached" not in capsys.readouterr().out


def test_train_base_reports_stagnation_retry(make_config, capsys):
    # an absurd tolerance makes every loss curve count as flat
    path, _ = make_config(base_extra="stagnation_window = 2\nstagnation_tol = 1e9\nmax_retries = 1")
    Path(path).write_text(Path(path).read_text().replace("epochs = 1", "epochs = 2"))
    assert cli.main(["train-base", "--config", path, "--seed", "0"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert out.count("stagnation detected") == 1 and "reinitialized with seed" in out


def test_run_merges_seeds_and_is_deterministic(make_config, capsys, tmp_path):
    path, out = make_config()
    assert cli.main(["run", "--config", path]) == cli.EXIT_OK
    grid = capsys.readouterr().out
    assert "== tiny_flip" in grid and "incl_noEE" in grid
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["cells"]) == 4 and all(c["status"] == "ok" for c in summary["cells"])
    entry = summary["scenarios"]["tiny_flip"]["incl_noEE"]
    assert entry["seeds"] == [0, 1] and set(entry["stddev"]) >= {"avg_acc", "final_acc"}
    assert (out / "effective_config.toml").exists()
    assert cfgmod.load(out / "effective_config.toml").run.models == ["baseline", "incl_noEE"]
    with open(out / "runs.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 8

    # the frozen baseline never recovers, which renders as ---
    base_line = next(l for l in grid.splitlines() if l.startswith("baseline"))
    assert "---" in base_line

    # a rerun from the cached streams and bases reproduces every number
    again, _ = make_config(out=tmp_path / "out2")
    shutil.copytree(out / "bases", tmp_path / "out2" / "bases")
    assert cli.main(["run", "--config", again]) == cli.EXIT_OK
    assert json.loads((tmp_path / "out2" / "summary.json").read_text())["scenarios"] == summary["scenarios"]
    assert (tmp_path / "out2" / "runs.csv").read_text() == (out / "runs.csv").read_text()


def test_run_with_broken_checkpoint_exits_3(make_config, capsys):
    path, out = make_config()
    (out / "bases").mkdir(parents=True)
    (out / "bases" / "tiny_flip__seed0.nnpk").write_bytes(b"NNPK garbage")
    assert cli.main(["run", "--config", path, "--seed", "0"]) == cli.EXIT_RUNTIME
    # one (model, seed) cell per configured model
    assert "2 of 2 cells failed" in capsys.readouterr().err
    summary = json.loads((out / "summary.json").read_text())
    assert {c["status"] for c in summary["cells"]} == {"failed"}
    assert summary["cells"][0]["error"]


def test_sweep_layers_and_arch(make_config, capsys):
    path, out = make_config()
    assert cli.main(["sweep", "--config", path, "--seed", "0", "--kind", "layers"]) == cli.EXIT_OK
    with open(out / "sweep_layers.csv") as fh:
        rows = list(csv.DictReader(fh))
    # two layers, two taps, three measures
    assert len(rows) == 2 * 2 * 3
    assert {(r["layer"], r["tap"]) for r in rows} == {("fc1", "pre"), ("fc1", "post"), ("fc2", "pre"), ("fc2", "post")}

    assert cli.main(["sweep", "--config", path, "--seed", "0", "--kind", "arch"]) == cli.EXIT_OK
    with open(out / "sweep_arch.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 3 and {r["arch"] for r in rows} == {"8", "16x8"}
    assert (out / "arch_ranking__tiny_flip__seed0.csv").exists()


def test_sweep_with_empty_arch_list_is_config_error(make_config, capsys):
    path, _ = make_config()
    text = Path(path).read_text().replace('architectures = ["8", "16x8"]', "architectures = []")
    Path(path).write_text(text)
    assert cli.main(["sweep", "--config", path, "--kind", "arch"]) == cli.EXIT_CONFIG
    assert "architectures is empty" in capsys.readouterr().err


def test_report_skips_corrupt_summaries(tmp_path, capsys):
    good = {"scenarios": {"s1": {"a": {"avg_acc": 0.9, "final_acc": 0.8, "recovery_speed": 2,
                                       "adaptation_rank": 1.0, "finish_rank": 1.5},
                                 "b": {"avg_acc": 0.7, "final_acc": 0.8, "recovery_speed": None,
                                       "adaptation_rank": 2.0, "finish_rank": 1.5}}}}
    (tmp_path / "r1").mkdir()
    (tmp_path / "r1" / "summary.json").write_text(json.dumps(good))
    (tmp_path / "r2").mkdir()
    (tmp_path / "r2" / "summary.json").write_text("{not json")
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_OK
    captured = capsys.readouterr()
    assert "skipping" in captured.err and "r2" in captured.err
    assert "---" in captured.out
    with open(tmp_path / "meta_table.csv") as fh:
        table = {r["model_id"]: r for r in csv.DictReader(fh)}
    assert set(table) == {"a", "b"}
