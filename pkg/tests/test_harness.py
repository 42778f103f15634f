import csv
import json
import math

import numpy as np
import pytest

from polyrobust.errors import DomainError
from polyrobust.harness import (ExperimentConfig, build_smoothness_ellitope, gen_instance,
                                gen_sparse_nuisance, run_experiment, sample_signal,
                                smoothness_rows, trial_seeds)


def p_row_oracle(z, f0=4.0, df0=1.0, d2f=4.0):
    p = z.size
    h = 2 * math.pi / p
    ok = abs(z[0]) <= f0 and abs(z[1] - z[0]) / h <= df0
    return ok and all(abs(z[i - 2] - 2 * z[i - 1] + z[i]) / h ** 2 <= d2f for i in range(2, p))


def test_smoothness_examples():
    X = build_smoothness_ellitope(16)
    for c in (-4.0, 0.0, 2.5, 4.0):
        assert X.contains(c * np.ones(16))
    assert not X.contains(5.0 * np.ones(16))
    with pytest.raises(DomainError):
        build_smoothness_ellitope(2)


def test_smoothness_rows_shape():
    P = smoothness_rows(5)
    h = 2 * math.pi / 5
    assert P[0].tolist() == [1, 0, 0, 0, 0]
    assert np.allclose(P[1, :2] * h, [-1, 1])
    assert np.allclose(P[4, 2:] * h ** 2, [1, -2, 1])


def test_rejection_sampled_members_are_contained():
    p = 6
    X = build_smoothness_ellitope(p)
    rng = np.random.default_rng(0)
    # the first two rows pin z_1, z_2; later coordinates follow from bounded second differences
    h = 2 * math.pi / p
    found = 0
    while found < 1000:
        z = np.empty(p)
        z[0] = rng.uniform(-4, 4)
        z[1] = z[0] + h * rng.uniform(-1.2, 1.2)
        for i in range(2, p):
            z[i] = 2 * z[i - 1] - z[i - 2] + h ** 2 * rng.uniform(-4.5, 4.5)
        inside = p_row_oracle(z)
        assert X.contains(z) == inside
        found += inside
    assert found == 1000


def test_gen_instance():
    cfg = ExperimentConfig.preset("tiny")
    a, b = gen_instance(cfg, 5), gen_instance(cfg, 5)
    assert np.linalg.norm(a.A.T @ a.A - np.eye(cfg.p)) <= 1e-10
    assert np.array_equal(a.A, b.A)
    assert not np.array_equal(a.A, gen_instance(cfg, 6).A)
    assert np.array_equal(a.N, np.eye(cfg.m)) and np.array_equal(a.B, np.eye(cfg.p))
    assert a.nuisance.s == cfg.s


def test_custom_recipe(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "mats.json"
    path.write_text(json.dumps({"A": rng.standard_normal((8, 3)).tolist(),
                                "N": rng.standard_normal((8, 5)).tolist()}))
    cfg = ExperimentConfig(m=8, n=5, p=3, q=3, s=1, recipe="custom", custom_path=str(path))
    inst = gen_instance(cfg)
    assert inst.N.shape == (8, 5) and inst.X.dim == 3


def test_sparse_nuisance():
    nu = gen_sparse_nuisance(20, 4, 0.5, seed=1)
    assert np.count_nonzero(nu) == 4
    assert np.all((np.abs(nu[nu != 0]) >= 0.5) & (np.abs(nu[nu != 0]) <= 1.0))
    assert np.array_equal(nu, gen_sparse_nuisance(20, 4, 0.5, seed=1))
    assert not np.any(gen_sparse_nuisance(20, 0, 0.5, seed=1))
    with pytest.raises(DomainError):
        gen_sparse_nuisance(3, 4, 1.0, 0)


def test_support_is_uniform():
    n, s, draws = 10, 2, 10_000
    counts = np.zeros(n)
    for k in range(draws):
        counts += gen_sparse_nuisance(n, s, 1.0, k) != 0
    expected = draws * s / n
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 99th percentile of chi-square with 9 degrees of freedom
    assert chi2 <= 21.666


def test_signal_samplers():
    X = build_smoothness_ellitope(8)
    for seed in range(20):
        assert X.contains(sample_signal(X, seed))
        assert X.contains(sample_signal(X, seed, "hit-and-run", steps=30))
    assert np.array_equal(sample_signal(X, 3), sample_signal(X, 3))


def test_config_validation(tmp_path):
    with pytest.raises(DomainError):
        ExperimentConfig(s=0)
    with pytest.raises(DomainError):
        ExperimentConfig(s=65)
    with pytest.raises(DomainError):
        ExperimentConfig(epsilon=1.0)
    with pytest.raises(DomainError):
        ExperimentConfig(estimators=("HIG",))
    with pytest.raises(DomainError):
        ExperimentConfig.preset("huge")
    cfg = ExperimentConfig.preset("tiny", seed=3)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path) == cfg
    assert ExperimentConfig.from_dict({"preset": "tiny", "seed": 3}) == cfg


def test_trial_seeds_are_deterministic():
    assert trial_seeds(0, 5) == trial_seeds(0, 5)
    assert trial_seeds(0, 5) != trial_seeds(1, 5)
    assert len(set(trial_seeds(0, 100))) == 100


@pytest.fixture(scope="module")
def tiny_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = ExperimentConfig.preset("tiny", n_trials=12, output_dir=str(out))
    return cfg, run_experiment(cfg), out


def test_tiny_experiment_invariants(tiny_report):
    cfg, report, _ = tiny_report
    assert report.violations() == [] and report.nu_violations() == []
    agg = report.synthesis["HIG"]
    assert report.bounds["HIG"] == min(agg["bound_a"], agg["bound_b"])
    for est in ("HG", "IG", "HIG"):
        assert len(report.rows(est)) == cfg.n_trials
        assert report.outside_fraction(est) <= cfg.epsilon + 3 * math.sqrt(
            cfg.epsilon * (1 - cfg.epsilon) / cfg.n_trials)


def test_reports_written(tiny_report):
    cfg, report, out = tiny_report
    with open(out / "trials.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3 * cfg.n_trials
    assert {"trial", "estimator", "error", "bound", "in_confidence_set"} <= set(rows[0])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["seed"] == cfg.seed
    assert set(summary["bounds"]) == {"HG", "IG", "HIG"}
    assert "q50" in summary["summary"]["HIG"]["error"]
    assert "opt2" in summary["nu_bounds"]["IG"]


def test_experiment_is_reproducible(tiny_report):
    cfg, report, _ = tiny_report
    again = run_experiment(ExperimentConfig.preset("tiny", n_trials=3, estimators=("HG",)))
    first = [r["error"] for r in report.rows("HG")[:3]]
    assert [r["error"] for r in again.rows("HG")] == pytest.approx(first, rel=1e-6, abs=1e-8)


def test_parallel_workers_match_serial():
    cfg = ExperimentConfig.preset("tiny", n_trials=4, estimators=("IG",))
    serial = run_experiment(cfg)
    cfg.workers = 2
    parallel = run_experiment(cfg)
    assert [r["error"] for r in serial.records] == pytest.approx(
        [r["error"] for r in parallel.records], rel=1e-6, abs=1e-8)


def test_noiseless_limit():
    cfg = ExperimentConfig.preset("tiny", n_trials=3, sigma=1e-7, nuisance_amplitude=0.0,
                                  estimators=("HG", "IG", "HIG"))
    report = run_experiment(cfg)
    for r in report.records:
        assert r["feasible"] and r["error"] <= 1e-4
