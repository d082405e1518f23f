import csv
import filecmp
import io
import os
import subprocess
import sys

import numpy as np
import pytest

from critrec.cli import EXIT_ABORT, EXIT_ASSUMPTION, EXIT_CONFIG, EXIT_OK, main
from critrec.config import ConfigError, RunConfig, load_config, parse_config
from critrec.measure import merge_all, run_ratio
from critrec.model import m1
from critrec.rng import RandomStream

M1_SMALL = """\
model: M1
run: {seed: 3, replicas: 4, n_steps: 400000, workers: 1}
tail: {pairs: [[1, 2], [1, 4]], window: [1, 3]}
constants: {mc_draws: 100, psi_grid: {lo: -12, hi: 16, step: 0.5}}
"""

M2_SMALL = """\
model: M2
run: {seed: 4, replicas: 2, n_cycles: 2000, estimator: ladder, cap: 1000000, burn_cycles: 1000, workers: 1}
tail: {pairs: [[1, 2]], window: [1, 3]}
constants: {mc_draws: 100, psi_grid: {lo: -12, hi: 16, step: 0.5}}
"""

M3_SMALL = """\
model: M3
run: {seed: 2, replicas: 4, n_steps: 2000000, workers: 1}
baseline: {window: [3, 100]}
"""

RUNS = [("validate", M1_SMALL), ("simulate", M1_SMALL), ("tail", M1_SMALL), ("constants", M1_SMALL),
        ("poisson-check", M1_SMALL), ("tail", M2_SMALL), ("constants", M2_SMALL),
        ("kesten-baseline", M3_SMALL)]


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def files(d):
    return sorted(os.listdir(d))


@pytest.mark.parametrize("sub,text", RUNS, ids=[f"{s}-{i}" for i, (s, _) in enumerate(RUNS)])
def test_rerun_is_byte_identical(tmp_path, sub, text):
    cfg = write(tmp_path, text)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([sub, "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main([sub, "--config", cfg, "--out", str(b)]) == EXIT_OK
    assert files(a) and files(a) == files(b)
    for name in files(a):
        assert filecmp.cmp(a / name, b / name, shallow=False), name


def test_worker_count_does_not_change_artifacts(tmp_path):
    cfg = write(tmp_path, M1_SMALL)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    cfg2 = write(tmp_path, M1_SMALL.replace("workers: 1", "workers: 2"), "run2.yaml")
    assert main(["simulate", "--config", cfg2, "--out", str(tmp_path / "b")]) == EXIT_OK
    assert filecmp.cmp(tmp_path / "a" / "histogram_ratio.csv", tmp_path / "b" / "histogram_ratio.csv",
                       shallow=False)


def _weights(path):
    rows = [r for r in csv.reader(l for l in open(path) if not l.startswith("#"))]
    return np.array([float(r[4]) for r in rows[1:]])


def test_replicas_equal_merged_single_runs(tmp_path):
    cfg = write(tmp_path, M1_SMALL)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    got = _weights(tmp_path / "o" / "histogram_ratio.csv")
    singles = [run_ratio(m1(), 100_000, RandomStream(3, r)).hist for r in range(4)]
    want = merge_all(singles).normalized().weights
    assert np.array_equal(got, want)


def test_header_carries_provenance(tmp_path):
    cfg = write(tmp_path, M1_SMALL)
    assert main(["validate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    head = (tmp_path / "o" / "validation.txt").read_text().splitlines()
    fp = load_config(cfg).fingerprint()
    assert head[0] == "# critrec validate"
    assert head[1] == f"# config_fingerprint: {fp}"
    assert head[3] == "# seed: 3"
    assert "ok: True" in head


def test_overwrite_refused_without_force(tmp_path):
    cfg = write(tmp_path, M1_SMALL)
    out = str(tmp_path / "o")
    assert main(["validate", "--config", cfg, "--out", out]) == EXIT_OK
    assert main(["validate", "--config", cfg, "--out", out]) == EXIT_CONFIG
    assert main(["validate", "--config", cfg, "--out", out, "--force"]) == EXIT_OK


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CRITREC_OUT", str(tmp_path / "root"))
    cfg = write(tmp_path, M1_SMALL)
    assert main(["validate", "--config", cfg]) == EXIT_OK
    fp = load_config(cfg).fingerprint()
    assert (tmp_path / "root" / fp / "validation.txt").exists()


def test_flag_overrides_change_fingerprint(tmp_path):
    cfg = write(tmp_path, M1_SMALL)
    assert main(["simulate", "--config", cfg, "--seed", "5", "--replicas", "2",
                 "--out", str(tmp_path / "o")]) == EXIT_OK
    text = (tmp_path / "o" / "histogram_ratio.csv").read_text()
    assert "# seed: 5" in text and "# replicas: 2" in text
    base = load_config(cfg)
    other = load_config(cfg)
    other.seed = 5
    assert base.fingerprint() != other.fingerprint()
    other.seed, other.workers, other.out_dir = 3, 7, "elsewhere"
    assert base.fingerprint() == other.fingerprint()


@pytest.mark.parametrize("text,line", [
    ("model: M1\nrun:\n  seed: 1\n  replicas: -2\n", 4),
    ("model: M1\nrun: {bogus: 1}\n", 2),
    ("model: M9\n", 1),
    ("model: M1\ntail:\n  pairs: [[2, 1]]\n", 3),
])
def test_config_errors_name_field_and_line(tmp_path, capsys, text, line):
    assert main(["validate", "--config", write(tmp_path, text)]) == EXIT_CONFIG
    assert f"(line {line})" in capsys.readouterr().err


def test_config_error_cases():
    with pytest.raises(ConfigError):
        parse_config("model: M1\nrun: {estimator: magic}\n")
    with pytest.raises(ConfigError):
        parse_config("model: [1, 2\n")
    with pytest.raises(ConfigError):
        parse_config("run: {seed: 1}\nextra: 2\nmodel: M1\n")
    cfg = parse_config("model: M2\nrun: {x0: embedded}\ntail: {window: auto}\n")
    assert cfg.x0 == "embedded" and cfg.window == "auto"
    assert isinstance(cfg, RunConfig)


def test_missing_config_and_bad_subcommand(tmp_path):
    assert main(["validate", "--config", str(tmp_path / "none.yaml")]) == EXIT_CONFIG
    assert main(["frobnicate", "--config", "x.yaml"]) == EXIT_CONFIG


@pytest.mark.parametrize("text", [
    "model:\n  chain: affine\n  a: {mean: 0.1, variance: 0.25}\n  b: {family: normal, mean: 0, variance: 1}\n",
    "model:\n  chain: letac\n  a: {mean: 0.0, variance: 0.25}\n  b: {family: normal, mean: 0, variance: 1}\n"
    "  c: {family: half_normal, scale: 1}\n",
])
def test_assumption_failures_exit_3(tmp_path, text):
    assert main(["validate", "--config", write(tmp_path, text)]) == EXIT_ASSUMPTION


def test_float_overflow_exits_4(tmp_path):
    text = "model: M1\nrun: {seed: 1, n_steps: 1000000, x0: 1e300, representation: float, workers: 1}\n"
    out = tmp_path / "o"
    assert main(["simulate", "--config", write(tmp_path, text), "--out", str(out)]) == EXIT_ABORT
    assert "status: aborted" in (out / "abort.txt").read_text()
    assert not (out / "histogram_ratio.csv").exists()


def test_cap_exclusions_exit_4(tmp_path):
    text = M2_SMALL.replace("cap: 1000000", "cap: 10")
    out = tmp_path / "o"
    assert main(["tail", "--config", write(tmp_path, text), "--out", str(out)]) == EXIT_ABORT
    assert "excluded cycle fraction" in (out / "abort.txt").read_text()


def test_wrong_regime_is_a_config_error(tmp_path):
    assert main(["kesten-baseline", "--config", write(tmp_path, M1_SMALL), "--out", str(tmp_path / "o")]) \
        == EXIT_CONFIG
    assert main(["constants", "--config", write(tmp_path, M3_SMALL), "--out", str(tmp_path / "p")]) \
        == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, M1_SMALL)
    proc = subprocess.run([sys.executable, "-m", "critrec", "validate", "--config", cfg,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "validation.txt").exists()
