import subprocess
import sys

import numpy as np
import pytest

from mutomo import harness as H
from mutomo import io
from mutomo.cli import main
from mutomo.config import RunConfig, load_config, sample_seeds
from mutomo.phantom import VoxelGrid
from mutomo.simulator import ConfigurationError, EventBatch, simulate_event_set

SMALL = """
seed: 3
phantom: {resolution: 8}
mlem: {resolution: 4, max_iterations: 5}
dataset: {train: 4, val: 2, test: 2, dosage: 128}
train: {epochs: 2, batch_size: 2}
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


# -- dataset files ----------------------------------------------------------------------

def two_samples():
    out = []
    for s in (1, 2):
        g = VoxelGrid(np.random.default_rng(s).uniform(0, 3, (4, 4, 4)))
        out.append(io.Sample(g, simulate_event_set(g, 50, s)))
    return out


def test_dataset_round_trip(tmp_path):
    samples = [io.quantize(s) for s in two_samples()]
    path = tmp_path / "d.bin"
    io.write_dataset(path, samples)
    back = io.read_dataset(path)
    assert len(back) == 2
    for a, b in zip(samples, back):
        assert a.grid.values.tobytes() == b.grid.values.tobytes()
        assert a.events.to_array().tobytes() == b.events.to_array().tobytes()
    assert io.encode_dataset(back) == path.read_bytes()


def test_dataset_grid_layout_x_fastest():
    g = VoxelGrid(np.arange(8, dtype=float).reshape(2, 2, 2))
    raw = io.encode_dataset([io.Sample(g, EventBatch.from_array(np.zeros((0, 15))))])
    vals = np.frombuffer(raw[14:14 + 32], "<f4")
    assert vals[1] == g.values[1, 0, 0] and vals[2] == g.values[0, 1, 0]


def test_empty_dataset():
    raw = io.encode_dataset([])
    assert raw == b"MUTM\x01\x00\x00\x00\x00\x00"
    assert io.decode_dataset(raw) == []


@pytest.mark.parametrize("damage", ["truncate", "magic", "version", "trailing"])
def test_dataset_corruption_detected(damage):
    raw = io.encode_dataset(two_samples())
    bad = {
        "truncate": raw[:-5],
        "magic": b"MUTX" + raw[4:],
        "version": raw[:4] + b"\x02\x00" + raw[6:],
        "trailing": raw + b"\x00",
    }[damage]
    with pytest.raises(io.DatasetFormatError):
        io.decode_dataset(bad)


# -- slices --------------------------------------------------------------------------------

def test_render_black_white_and_shape(tmp_path):
    zero = VoxelGrid.zeros(6)
    img = io.render_slice(zero, 2, 3, tmp_path / "z.pgm", peak=3.45)
    assert img.shape == (6, 6) and not np.any(img)
    full = VoxelGrid.uniform(6, 3.45)
    io.render_slice(full, 0, 0, tmp_path / "w.pgm", peak=3.45)
    back = io.read_pgm(tmp_path / "w.pgm")
    assert back.shape == (6, 6) and np.all(back == 255)
    with pytest.raises(IndexError):
        io.render_slice(zero, 1, 6, tmp_path / "x.pgm")


def test_slice_linear_mapping():
    g = VoxelGrid(np.full((2, 2, 2), 1.725))
    assert np.all(io.slice_image(g, 0, 0, 3.45) == 128)


# -- config --------------------------------------------------------------------------------

def test_config_defaults_and_overrides(small_cfg):
    cfg = load_config(small_cfg)
    assert cfg.resolution == 8 and cfg.dataset.dosage == 128 and cfg.seed == 3
    assert cfg.detector == RunConfig().detector
    assert load_config(text=cfg.dump()) == cfg
    assert load_config(text="poca: {threshold: 1e-3}").poca.threshold == 1e-3


@pytest.mark.parametrize("text", ["bogus: 1", "phantom: {resolutoin: 8}", "seed: [1]",
                                  "mlem: {resolution: 3}", "poca: {threshold: abc}"])
def test_config_errors(text):
    with pytest.raises((ConfigurationError, ValueError)):
        load_config(text=text)


def test_sample_seeds_distinct():
    seeds = {sample_seeds(0, i) for i in range(200)}
    assert len(seeds) == 200
    assert sample_seeds(0, 5) != sample_seeds(1, 5)


def test_splits_are_disjoint():
    d = RunConfig().dataset
    tr, va, te = (set(d.split(s)) for s in ("train", "val", "test"))
    assert not (tr & va or tr & te or va & te)
    assert len(tr | va | te) == d.total


# -- sweeps --------------------------------------------------------------------------------

def test_dosage_sweep_rows(small_cfg):
    cfg = load_config(small_cfg)
    rows = H.run_sweep(cfg, "dosage", [256, 1024, 4096], ["poca"])
    assert [(r["method"], r["dosage"]) for r in rows] == [("poca", 256), ("poca", 1024), ("poca", 4096)]
    assert all(np.isfinite(r["psnr"]) for r in rows)


def test_sweep_conditions():
    cfg = RunConfig()
    dos, det = H._condition(cfg, "momentum_error", 0.0)
    assert det.momentum_error == 0.0 and dos == cfg.dataset.dosage
    for v in ("inf", None, 0):
        assert H._condition(cfg, "detector_resolution", v)[1].pixels_per_side is None
    assert H._condition(cfg, "detector_resolution", 64)[1].pixels_per_side == 64
    with pytest.raises(ValueError):
        H._condition(cfg, "colour", 1)


def test_ideal_detector_matches_true_events(small_cfg):
    cfg = load_config(small_cfg)
    _, det = H._condition(cfg, "momentum_error", 0.0)
    s = H.make_samples(cfg, [0], detector=det)[0]
    grid = H.phantom_for(cfg, 0)
    true = io.quantize(io.Sample(grid, H.true_events_for(cfg, 0, grid)))
    assert s.events.to_array().tobytes() == true.events.to_array().tobytes()


def test_sweep_needs_checkpoint_for_learned_method():
    with pytest.raises(ValueError, match="checkpoint"):
        H.run_sweep(RunConfig(), "dosage", [128], ["munet"])
    with pytest.raises(ValueError):
        H.run_sweep(RunConfig(), "dosage", [128], ["fbp"])


def test_mlem_method_upsamples(small_cfg):
    cfg = load_config(small_cfg)
    samples = H.make_samples(cfg, [0])
    (pred,) = H.reconstruct("mlem", samples, cfg)
    assert pred.shape == (8, 8, 8)
    np.testing.assert_array_equal(pred[::2, ::2, ::2], pred[1::2, 1::2, 1::2])


def test_csv_round_trip_and_plot(tmp_path):
    rows = [{"method": "poca", "axis": "dosage", "axis_value": 256, "dosage": 256,
             "mse": 0.1, "mae": 0.2, "psnr": 20.5, "seconds": 1.0}]
    H.write_csv(tmp_path / "r.csv", rows)
    back = H.read_csv(tmp_path / "r.csv")
    assert list(back[0]) == H.CSV_HEADER and float(back[0]["psnr"]) == 20.5
    H.plot_sweep(rows, tmp_path / "r.png")
    assert (tmp_path / "r.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


# -- CLI -----------------------------------------------------------------------------------

def test_cli_missing_checkpoint_one_line_error(tmp_path, small_cfg, capsys):
    rc = main(["eval", "--config", str(small_cfg), "--methods", "munet", "--out", str(tmp_path / "e.csv")])
    err = capsys.readouterr().err.strip().splitlines()
    assert rc == 1
    assert err[-1].startswith("mutomo: error: ValueError:") and "checkpoint" in err[-1]
    rc = main(["-q", "eval", "--config", str(small_cfg), "--checkpoint", str(tmp_path / "none.ckpt"),
               "--methods", "munet", "--out", str(tmp_path / "e.csv")])
    err = capsys.readouterr().err.strip().splitlines()
    assert rc == 1 and len(err) == 1 and "FileNotFoundError" in err[0]


def test_cli_bad_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("phantom: {size: 8}\n")
    rc = main(["-q", "phantom", "--config", str(bad), "--out", str(tmp_path / "p.bin")])
    assert rc == 1 and "phantom.size" in capsys.readouterr().err


def test_cli_phantom_simulate_render(tmp_path, small_cfg):
    cfgs = ["--config", str(small_cfg)]
    assert main(["-q", "phantom", *cfgs, "--index", "1", "--out", str(tmp_path / "p.bin")]) == 0
    (p,) = io.read_dataset(tmp_path / "p.bin")
    assert p.grid.values.tobytes() == io.quantize(
        io.Sample(H.phantom_for(load_config(small_cfg), 1), p.events)).grid.values.tobytes()
    assert main(["-q", "simulate", *cfgs, "--split", "test", "--out", str(tmp_path / "t.bin")]) == 0
    test = io.read_dataset(tmp_path / "t.bin")
    assert len(test) == 2 and all(len(s.events) == 128 for s in test)
    assert main(["-q", "render", *cfgs, "--data", str(tmp_path / "t.bin"), "--out", str(tmp_path / "s.pgm")]) == 0
    assert io.read_pgm(tmp_path / "s.pgm").shape == (8, 8)
    assert main(["-q", "reconstruct", *cfgs, "--data", str(tmp_path / "t.bin"), "--method", "poca",
                 "--out", str(tmp_path / "rec.bin")]) == 0
    assert len(io.read_dataset(tmp_path / "rec.bin")) == 2


def run_cli(args, threads):
    cmd = [sys.executable, "-m", "mutomo.cli", "-q", "--threads", str(threads), *args]
    res = subprocess.run(cmd, capture_output=True, text=True, timeout=1200)
    assert res.returncode == 0, res.stderr
    return res


def metric_columns(path):
    return [{k: v for k, v in r.items() if k != "seconds"} for r in H.read_csv(path)]


def cli_pipeline(workdir, cfg_path, threads, label):
    """simulate, train and eval; returns the artefacts that must be reproducible."""
    c = ["--config", str(cfg_path)]
    d = workdir / label
    d.mkdir()
    run_cli(["simulate", *c, "--split", "train", "--out", str(d / "train.bin")], threads)
    run_cli(["simulate", *c, "--split", "val", "--out", str(d / "val.bin")], threads)
    run_cli(["simulate", *c, "--split", "test", "--out", str(d / "test.bin")], threads)
    run_cli(["train", *c, "--data", str(d / "train.bin"), "--val", str(d / "val.bin"),
             "--out", str(d / "m.ckpt")], threads)
    run_cli(["eval", *c, "--data", str(d / "test.bin"), "--methods", "poca,mlem,munet",
             "--checkpoint", str(d / "m.ckpt"), "--out", str(d / "e.csv")], threads)
    run_cli(["sweep", *c, "--axis", "dosage", "--values", "64,128", "--out", str(d / "s.csv")], threads)
    return {
        "train": (d / "train.bin").read_bytes(),
        "test": (d / "test.bin").read_bytes(),
        "checkpoint": (d / "m.ckpt").read_bytes(),
        "eval": metric_columns(d / "e.csv"),
        "sweep": metric_columns(d / "s.csv"),
        "plots": [(d / "m_history.png").exists(), (d / "s.png").exists()],
    }


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    work = tmp_path_factory.mktemp("cli")
    cfg = work / "small.yaml"
    cfg.write_text(SMALL)
    return [cli_pipeline(work, cfg, t, f"run{i}") for i, t in enumerate((1, 2, 1))]


def test_cli_outputs_independent_of_threads(cli_runs):
    first = cli_runs[0]
    assert first["plots"] == [True, True]
    for other in cli_runs[1:]:
        for key in first:
            assert first[key] == other[key], key
