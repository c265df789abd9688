import json

import numpy as np
import pytest

from stochflash.cli import main
from stochflash.io import read_image, read_raw_image, write_raw_image

CONFIG = """
[grid]
nx = 16
ny = 16
trunc = 8
[run]
nsteps = 20
samples = {samples}
seed = 5
[noise.c]
mu_x = 0.5
mu_y = 0.5
tau = 0.1
lambda = {lam}
[estimate]
trials = 3
max_iter = 2
tau_bounds = 0.05, 0.2
lambda_bounds = 0.5, 2.0
"""


@pytest.fixture
def workdir(tmp_path):
    assert main(["phantom", "--size", "16", "--out", str(tmp_path)]) == 0
    return tmp_path


def write_config(path, samples=4, lam="1.0"):
    path.write_text(CONFIG.format(samples=samples, lam=lam))
    return str(path)


def test_simulate_stats_round_trip(workdir):
    cfg = write_config(workdir / "exp.ini")
    assert main(["simulate", "--config", cfg, "--image", str(workdir / "I0.raw"), "--out", str(workdir / "ds")]) == 0
    manifest = json.loads((workdir / "ds" / "manifest.json").read_text())
    assert len(manifest["samples"]) == 4 and manifest["failed"] == 0
    assert len({s["seed"] for s in manifest["samples"]}) == 4
    assert main(["stats", "--data", str(workdir / "ds"), "--out", str(workdir / "st")]) == 0
    imgs = [read_image(workdir / "ds" / s["file"]) for s in manifest["samples"]]
    assert np.allclose(read_raw_image(workdir / "st" / "mean.raw"), np.mean(imgs, axis=0))
    assert np.allclose(read_raw_image(workdir / "st" / "var.raw"), np.var(imgs, axis=0))


def test_zero_noise_samples_equal_deterministic_warp(workdir):
    cfg = write_config(workdir / "exp.ini", samples=3, lam="0.0")
    assert main(["simulate", "--config", cfg, "--image", str(workdir / "I0.raw"), "--out", str(workdir / "ds")]) == 0
    imgs = [read_image(workdir / "ds" / f"sample_{i:04d}.raw") for i in range(3)]
    assert np.array_equal(imgs[0], imgs[1]) and np.array_equal(imgs[0], imgs[2])
    assert np.array_equal(imgs[0], read_image(workdir / "I0.raw"))  # v0 = 0: identity warp


def test_stats_closed_form(tmp_path):
    write_raw_image(tmp_path / "a.raw", np.zeros((4, 4)))
    write_raw_image(tmp_path / "b.raw", np.ones((4, 4)))
    assert main(["stats", str(tmp_path / "a.raw"), str(tmp_path / "b.raw"), "--out", str(tmp_path / "o")]) == 0
    assert np.all(read_raw_image(tmp_path / "o" / "mean.raw") == 0.5)
    assert np.all(read_raw_image(tmp_path / "o" / "var.raw") == 0.25)
    assert main(["stats", str(tmp_path / "a.raw"), "--out", str(tmp_path / "o1")]) == 0
    assert not read_raw_image(tmp_path / "o1" / "var.raw").any()


def test_stats_size_mismatch(tmp_path):
    write_raw_image(tmp_path / "a.raw", np.zeros((4, 4)))
    write_raw_image(tmp_path / "b.raw", np.zeros((4, 5)))
    assert main(["stats", str(tmp_path / "a.raw"), str(tmp_path / "b.raw"), "--out", str(tmp_path / "o")]) == 1


def test_compare(workdir, capsys):
    I0 = str(workdir / "I0.raw")
    assert main(["compare", I0, I0, "--measure", "nmi"]) == 0
    assert float(capsys.readouterr().out) == 2.0
    assert main(["compare", I0, I0, "--measure", "l2"]) == 0
    assert float(capsys.readouterr().out) == 0.0
    write_raw_image(workdir / "small.raw", np.zeros((8, 8)))
    assert main(["compare", I0, str(workdir / "small.raw")]) == 1


def test_moments_and_shoot(workdir):
    cfg = write_config(workdir / "exp.ini")
    I0 = str(workdir / "I0.raw")
    assert main(["moments", "--config", cfg, "--image", I0, "--out", str(workdir / "m"), "--format", "pgm"]) == 0
    for name in ("mean_image.raw", "var_image.raw", "mean_image.pgm", "mean_psi.dgf", "var_psi.dgf", "mean_v.sfv"):
        assert (workdir / "m" / name).exists()
    assert main(["shoot", "--config", cfg, "--image", I0, "--out", str(workdir / "s"), "--times", "0,0.5,1"]) == 0
    assert len(list((workdir / "s").glob("image_*.raw"))) == 3
    assert main(["shoot", "--config", cfg, "--image", I0, "--out", str(workdir / "s"), "--times", "2"]) == 1


def test_estimate_writes_outputs(workdir):
    cfg = write_config(workdir / "exp.ini", samples=4)
    I0 = str(workdir / "I0.raw")
    assert main(["simulate", "--config", cfg, "--image", I0, "--out", str(workdir / "ds")]) == 0
    est = write_config(workdir / "est.ini", lam="?")
    text = (workdir / "est.ini").read_text().replace("tau = 0.1", "tau = ?")
    (workdir / "est.ini").write_text(text)
    assert main(["estimate", "--config", est, "--data", str(workdir / "ds"), "--out", str(workdir / "e")]) == 0
    rows = (workdir / "e" / "params.csv").read_text().splitlines()
    assert rows[0].startswith("field,") and len(rows) == 2
    assert (workdir / "e" / "trace_tau.csv").exists() and (workdir / "e" / "trace_lambda.csv").exists()


@pytest.mark.parametrize("argv", [
    ["simulate", "--config", "missing.ini", "--image", "x.raw", "--out", "o"],
    ["moments", "--image", "x.raw", "--out", "o"],
])
def test_validation_exit_code(tmp_path, argv, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    assert not (tmp_path / "o").exists()


def test_numerical_failure_exit_code(workdir):
    cfg = workdir / "exp.ini"
    write_config(cfg, lam="500.0")
    text = cfg.read_text().replace("tau = 0.1", "tau = 0.06")
    cfg.write_text(text)
    assert main(["moments", "--config", str(cfg), "--image", str(workdir / "I0.raw"), "--out", str(workdir / "m")]) == 2


def test_image_grid_mismatch(workdir):
    cfg = write_config(workdir / "exp.ini")
    write_raw_image(workdir / "big.raw", np.zeros((32, 32)))
    assert main(["moments", "--config", cfg, "--image", str(workdir / "big.raw"), "--out", str(workdir / "m")]) == 1


def test_thread_count_does_not_change_output(workdir, monkeypatch):
    cfg = write_config(workdir / "exp.ini", samples=30)
    I0 = str(workdir / "I0.raw")
    assert main(["simulate", "--config", cfg, "--image", I0, "--out", str(workdir / "a"), "--threads", "1"]) == 0
    monkeypatch.setenv("STOCHFLASH_THREADS", "3")
    assert main(["simulate", "--config", cfg, "--image", I0, "--out", str(workdir / "b")]) == 0
    assert (workdir / "a" / "manifest.json").read_bytes() == (workdir / "b" / "manifest.json").read_bytes()


def test_seed_override(workdir):
    cfg = write_config(workdir / "exp.ini", samples=2)
    I0 = str(workdir / "I0.raw")
    main(["simulate", "--config", cfg, "--image", I0, "--out", str(workdir / "a")])
    main(["simulate", "--config", cfg, "--image", I0, "--out", str(workdir / "b"), "--seed", "99"])
    a = json.loads((workdir / "a" / "manifest.json").read_text())
    b = json.loads((workdir / "b" / "manifest.json").read_text())
    assert a["samples"][0]["seed"] != b["samples"][0]["seed"]
