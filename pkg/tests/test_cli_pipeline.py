import csv
import hashlib
from dataclasses import replace

import numpy as np
import pytest

from tsmemory import cli
from tsmemory import config as cfgmod
from tsmemory.pipeline import FILES, PipelineError, open_run, run_pipeline, run_stages
from tsmemory.series import read_csv
from tsmemory.synthetic import SyntheticRecipe, gen_synthetic

SMALL_TOML = """
seed = 3
[data.recipe]
length = 1500
shifts = [[750, 5.0]]
[window]
lookback = 48
horizon = 12
[retrieval]
K = 8
K_cand = 32
[student]
width = 8
enc_layers = 1
[trainer]
epochs = 2
batch_size = 128
lr = 0.003
[eval]
horizons = [6, 12]
grid_step = 0.1
beta_step = 0.25
[bench]
multipliers = [1, 2]
warmup = 5
queries = 20
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL_TOML)
    return p


# config -----------------------------------------------------------------

def test_default_config_roundtrip():
    cfg = cfgmod.PipelineConfig()
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg
    assert cfg.window.lookback == 96 and cfg.window.horizon == 24
    assert cfg.data.recipe.length == 8000 and cfg.data.recipe.channels == 3 and cfg.period == 48


def test_config_file_overrides_and_seed(small_cfg):
    cfg = cfgmod.load(small_cfg)
    assert cfg.window.lookback == 48 and cfg.retrieval.K == 8 and cfg.trainer.epochs == 2
    assert cfg.data.recipe.shifts == ((750, 5.0),)
    s = cfg.with_seed(11)
    assert s.data.recipe.seed == s.trainer.seed == s.student.seed == 11
    assert cfgmod.loads(cfgmod.dumps(s)) == s


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown keys"):
        cfgmod.loads("[trainer]\nlearning_rate = 1.0\n")


def test_write_config_subcommand(capsys):
    assert cli.main(["write-config", "--seed", "5"]) == 0
    cfg = cfgmod.loads(capsys.readouterr().out)
    assert cfg.seed == 5 and cfg.trainer.seed == 5


# synthetic data ---------------------------------------------------------

def test_synthetic_noiseless_is_exact_sinusoid():
    r = SyntheticRecipe(length=480, channels=2, period=48, amplitude=1.5, slope=0.0, noise=0.0, shifts=())
    f = gen_synthetic(r)
    t = np.arange(480)
    np.testing.assert_allclose(f.values[:, 1], 1.5 * np.sin(2 * np.pi * t / 48 + np.pi), atol=1e-12)
    assert f.channel_names == ("ch0", "ch1") and f.period_hint == 48


def test_synthetic_shift_mean_arithmetic():
    T, slope = 4800, 1e-3
    f = gen_synthetic(SyntheticRecipe(length=T, noise=0.0, slope=slope, shifts=((T // 2, 5.0),)))
    first, second = f.values[: T // 2].mean(axis=0), f.values[T // 2:].mean(axis=0)
    # whole cycles average out; the ramp contributes slope * T / 2 between the halves
    np.testing.assert_allclose(second - first, 5.0 + slope * T / 2, atol=1e-9)


def test_synthetic_same_seed_identical():
    a, b = gen_synthetic(SyntheticRecipe(seed=4)), gen_synthetic(SyntheticRecipe(seed=4))
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, gen_synthetic(SyntheticRecipe(seed=5)).values)


# pipeline ---------------------------------------------------------------

def _manifest(path):
    rows = {}
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            continue
        name, size, digest = line.split("\t")
        rows[name] = (int(size), digest)
    return rows


def test_run_all_small_and_manifest(small_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["run-all", "--config", str(small_cfg), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "alpha*" in printed and "latency" in printed
    man = _manifest(out / "MANIFEST")
    expected = {FILES[k] for k in ("config", "data", "backbone", "cache", "teacher", "params", "train_log",
                                   "risk", "fusion", "latency", "summary")}
    expected |= {f"eval_{m}.csv" for m in ("backbone", "student", "fused", "online")}
    assert expected <= set(man)
    for name, (size, digest) in man.items():
        data = (out / name).read_bytes()
        assert len(data) == size and hashlib.sha256(data).hexdigest() == digest
    assert "# completed_stage bench" in (out / "MANIFEST").read_text()

    with open(out / "eval_fused.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["horizon"] for r in rows] == ["6", "12", "avg"]
    with open(out / "latency.csv") as fh:
        lat = list(csv.DictReader(fh))
    for r in lat:
        assert abs(float(r["retr_ms"]) + float(r["fwd_ms"]) - float(r["total_ms"])) < 1e-5
        if r["method"] == "ts-memory":
            assert float(r["retr_ms"]) == 0.0
    fused = {r["horizon"]: float(r["pinball"]) for r in rows}
    with open(out / "eval_backbone.csv") as fh:
        base = {r["horizon"]: float(r["pinball"]) for r in csv.DictReader(fh)}
    with open(out / "risk_curve.csv") as fh:
        curve = [float(r["risk"]) for r in csv.DictReader(fh)]
    assert min(curve) <= curve[0]
    assert np.isfinite(fused["avg"]) and np.isfinite(base["avg"])
    assert read_csv(out / "data.csv").values.shape == (1500, 3)


def test_subcommands_match_run_all(small_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg = replace(cfgmod.load(small_cfg), bench=replace(cfgmod.load(small_cfg).bench, in_run_all=False))
    run_pipeline(cfg, out=a)
    base = ["--config", str(small_cfg), "--out", str(b)]
    for sub in ("gen-data", "build-teacher", "train", "tune-alpha", "evaluate"):
        assert cli.main([sub] + base) == 0
    for name in ("cache.tsmc", "teacher.tsmt", "student.tsmp", "risk_curve.csv", "train_log.csv",
                 "eval_backbone.csv", "eval_student.csv", "eval_fused.csv", "eval_online.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_failed_stage_keeps_partial_artifacts(small_cfg, tmp_path, capsys):
    out = tmp_path / "fail"
    run = open_run(cfgmod.load(small_cfg), out)
    with pytest.raises(PipelineError) as ei:
        run_stages(run, ["data", "train"])  # no teacher file yet
    assert ei.value.stage == "train"
    text = (out / "MANIFEST").read_text()
    assert "# completed_stage data" in text and "# error train" in text
    assert "data.csv" in _manifest(out / "MANIFEST")
    assert cli.main(["tune-alpha", "--out", str(tmp_path / "empty"), "--config", str(small_cfg)]) == 1
    assert "stage 'tune-alpha' failed" in capsys.readouterr().err
