from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcox.bench import (
    METRIC_COLUMNS,
    BenchmarkConfig,
    aggregate,
    cluster_contingency,
    effective_sample_size,
    estimator_metrics,
    read_rows,
    replicate_seed,
    run_benchmark,
    run_replicate,
)


def test_perfect_estimator():
    m = estimator_metrics([-0.1] * 5, [(-0.2, 0.0)] * 5, -0.1)
    assert m.bias == 0 and m.ese == 0 and m.rmse == 0 and m.cp == 1.0


def test_two_point_metrics():
    m = estimator_metrics([-0.2, 0.0], [(-0.3, -0.15), (-0.05, 0.05)], -0.1)
    assert m.bias == pytest.approx(0.0, abs=1e-15)
    assert m.ese == pytest.approx(0.1414214, abs=1e-6)
    assert m.rmse == pytest.approx(0.1, abs=1e-12)
    assert m.cp == 0.0


@pytest.mark.parametrize(
    "est,iv",
    [([], []), ([0.1], [(0, 1)]), ([0.1, 0.2], [(0, 1)])],
)
def test_metrics_reject_bad_input(est, iv):
    with pytest.raises(ValueError):
        estimator_metrics(est, iv, 0.0)


@settings(max_examples=100, deadline=None)
@given(
    est=st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=60),
    truth=st.floats(-5, 5),
    half=st.floats(0, 3),
)
def test_metrics_identity(est, truth, half):
    iv = [(e - half, e + half) for e in est]
    m = estimator_metrics(est, iv, truth)
    r = len(est)
    assert abs(m.rmse**2 - (m.bias**2 + m.ese**2 * (r - 1) / r)) <= 1e-10 * max(1.0, m.rmse**2)
    assert 0.0 <= m.cp <= 1.0
    assert m.rmse >= abs(m.bias) - 1e-12


def test_ess_iid():
    x = np.random.default_rng(0).normal(size=10_000)
    assert 0.8 * x.size <= effective_sample_size(x) <= 1.2 * x.size


def test_ess_ar1():
    rng = np.random.default_rng(1)
    n, rho = 100_000, 0.9
    e = rng.normal(size=n)
    x = np.empty(n)
    x[0] = e[0]
    for i in range(1, n):
        x[i] = rho * x[i - 1] + e[i]
    expected = (1 - rho) / (1 + rho)  # 0.0526
    assert abs(effective_sample_size(x) / n - expected) <= 0.2 * expected


def test_ess_constant_and_short():
    assert effective_sample_size(np.ones(50)) == 50
    with pytest.raises(ValueError):
        effective_sample_size(np.arange(5.0))


def test_contingency_perfect_and_single():
    u = np.array([0, 0, 1, 1, 1, 2])
    assert cluster_contingency(u + 3, u).purity == 1.0
    assert cluster_contingency(np.zeros(6, dtype=int), u).purity == pytest.approx(0.5)


def test_contingency_oversplit_near_pure():
    # many small clusters, each almost entirely one level
    rows = [(0, 24, 0), (66, 0, 0), (60, 0, 0), (26, 5, 0), (0, 19, 0), (52, 1, 0), (0, 0, 26), (0, 0, 9)]
    labels, u = [], []
    for k, counts in enumerate(rows):
        for level, c in enumerate(counts):
            labels += [k] * c
            u += [level] * c
    tab = cluster_contingency(labels, u)
    assert tab.purity >= 0.95
    assert tab.counts.sum() == len(u)
    assert sum(r["count"] for r in tab.to_rows()) == len(u)


def test_contingency_errors():
    with pytest.raises(ValueError):
        cluster_contingency([0, 1], [0])
    with pytest.raises(ValueError):
        cluster_contingency([], [])


def test_replicate_seed_distinct():
    a = replicate_seed(1, "easy", "a", 0).generate_state(2)
    b = replicate_seed(1, "easy", "a", 1).generate_state(2)
    c = replicate_seed(1, "hard", "a", 0).generate_state(2)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)


def test_config_validation():
    with pytest.raises(ValueError):
        BenchmarkConfig(reps=1)
    with pytest.raises(ValueError):
        BenchmarkConfig(methods=("bogus",))
    with pytest.raises(ValueError):
        BenchmarkConfig(jobs=0)
    with pytest.raises(ValueError):
        BenchmarkConfig(level=1.5)


def _small(**kw):
    base = dict(methods=("naive",), reps=2, n=100)
    base.update(kw)
    return BenchmarkConfig(**base)


def test_small_run_shapes(tmp_path):
    rep = run_benchmark(_small())
    assert len(rep.metrics) == 1 and len(rep.boxplot) == 2
    assert rep.metrics[0]["n_reps"] == 2
    paths = rep.write(tmp_path)
    assert read_rows(paths["metrics"])[0].keys() == set(METRIC_COLUMNS)


def test_reruns_byte_identical(tmp_path):
    cfg = _small(methods=("naive", "2sls"))
    run_benchmark(cfg).write(tmp_path / "a")
    run_benchmark(BenchmarkConfig(**{**cfg.__dict__, "jobs": 2})).write(tmp_path / "b")
    for name in ("metrics", "boxplot", "replicates"):
        assert (tmp_path / "a" / f"{name}.csv").read_bytes() == (tmp_path / "b" / f"{name}.csv").read_bytes()


def test_failures_recorded_not_raised(monkeypatch):
    from dpcox import bench

    def boom(ds, level):
        raise RuntimeError("solver blew up")

    monkeypatch.setitem(bench._BASELINES, "naive", boom)
    rows = run_replicate(_small(), "easy", "a", 0)
    monkeypatch.undo()
    assert rows[0]["error"]
    assert np.isnan(rows[0]["estimate"])
    m = aggregate(rows + run_replicate(_small(), "easy", "a", 1))
    assert m[0]["n_failed"] == 1


def test_aggregate_roundtrip_through_csv(tmp_path):
    rep = run_benchmark(_small(methods=("naive", "infeasible")))
    paths = rep.write(tmp_path)
    again = aggregate(read_rows(paths["replicates"]))
    for a, b in zip(rep.metrics, again):
        assert a["method"] == b["method"]
        assert a["bias"] == pytest.approx(b["bias"], abs=1e-15)
        assert a["cp"] == b["cp"]


def test_proposed_row_carries_diagnostics():
    from dpcox.sampler import McmcConfig

    cfg = BenchmarkConfig(methods=("proposed",), reps=2, n=60,
                          mcmc=McmcConfig(total_iters=60, burn_in=20, homogeneous_sigma=True))
    row = run_replicate(cfg, "hard", "a", 0)[0]
    assert row["error"] == ""
    for key in ("k_n", "ess", "gamma", "purity", "beta_x_1", "alpha_z_1"):
        assert key in row
    assert 0 < row["purity"] <= 1
