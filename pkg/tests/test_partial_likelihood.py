from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcox.data import (
    FULL_DESIGN,
    NAIVE_DESIGN,
    Dataset,
    DatasetError,
    DesignSelector,
    OutcomeCoefficients,
    SurvivalRecord,
    read_dataset_csv,
    validate_dataset,
    write_dataset_csv,
)
from dpcox.partial_likelihood import (
    cluster_partial_log_lik,
    cluster_risk_set,
    partial_log_lik_gradient,
    partial_log_lik_hessian,
    subject_partial_log_lik_term,
)

from .conftest import brute_partial_log_lik, make_random_dataset

EXPOSURE_ONLY = DesignSelector(include_z=False, include_v=False)


def _ds(times, events, a=None):
    n = len(times)
    return Dataset.from_arrays(time=times, event=events, exposure=np.zeros(n) if a is None else a)


# -- validate_dataset --------------------------------------------------------


def test_validate_three_records():
    recs = [SurvivalRecord(i, 1.0 + i, 1, 0.5, (0.1,), (1.0,)) for i in range(3)]
    ds = validate_dataset(recs)
    assert ds.n == 3 and ds.dim_z == 1 and ds.dim_v == 1
    assert list(ds.ids) == [0, 1, 2]


def test_validate_rejects_zero_time():
    recs = [SurvivalRecord(0, 0.0, 1, 0.0), SurvivalRecord(1, 1.0, 1, 0.0)]
    with pytest.raises(DatasetError, match="nonpositive time"):
        validate_dataset(recs)


def test_validate_rejects_dimension_mismatch():
    recs = [SurvivalRecord(0, 1.0, 1, 0.0, (1.0,)), SurvivalRecord(1, 2.0, 1, 0.0, (1.0, 2.0))]
    with pytest.raises(DatasetError, match="dimension mismatch"):
        validate_dataset(recs)


@pytest.mark.parametrize(
    "recs, msg",
    [
        ([SurvivalRecord(0, 1.0, 2, 0.0), SurvivalRecord(1, 2.0, 1, 0.0)], "event flag"),
        ([SurvivalRecord(0, 1.0, 0, 0.0), SurvivalRecord(1, 2.0, 0, 0.0)], "all-censored"),
        ([SurvivalRecord(0, 1.0, 1, 0.0), SurvivalRecord(0, 2.0, 1, 0.0)], "duplicate"),
        ([], "empty"),
    ],
)
def test_validate_errors(recs, msg):
    with pytest.raises(DatasetError, match=msg):
        validate_dataset(recs)


def test_dataset_is_immutable(rng):
    ds = make_random_dataset(rng, 5)
    with pytest.raises(ValueError):
        ds.time[0] = 3.0


def test_csv_roundtrip(tmp_path, rng):
    ds = make_random_dataset(rng, 7, dim_z=2, dim_v=1)
    ds = Dataset.from_arrays(ds.time, ds.event, ds.exposure, ds.z, ds.v, true_cluster=[0, 1, 2, 0, 1, 2, 0])
    p = tmp_path / "d.csv"
    write_dataset_csv(ds, p)
    assert p.read_text().splitlines()[0] == "id,time,event,exposure,z1,z2,v1,true_cluster"
    back = read_dataset_csv(p)
    np.testing.assert_array_equal(back.time, ds.time)
    np.testing.assert_array_equal(back.z, ds.z)
    np.testing.assert_array_equal(back.true_cluster, ds.true_cluster)


def test_true_cluster_only_in_infeasible_design(rng):
    ds = make_random_dataset(rng, 6)
    ds = Dataset.from_arrays(ds.time, ds.event, ds.exposure, ds.z, ds.v, true_cluster=[0, 1, 2, 0, 1, 2])
    assert ds.design(FULL_DESIGN).shape[1] == 3
    assert ds.design(NAIVE_DESIGN).shape[1] == 2
    x = ds.design(DesignSelector(include_z=False, include_true_cluster=True))
    np.testing.assert_array_equal(x[:, 2], [0, 1, 0, 0, 1, 0])
    np.testing.assert_array_equal(x[:, 3], [0, 0, 1, 0, 0, 1])


# -- risk sets ---------------------------------------------------------------


def test_risk_set_single_cluster():
    ds = _ds([1.0, 2.0, 3.0], [1, 1, 1])
    np.testing.assert_array_equal(cluster_risk_set(ds, np.zeros(3, int), 0, 2.0), [1, 2])


def test_risk_set_contains_own_time(rng):
    ds = make_random_dataset(rng, 10)
    s = np.zeros(10, int)
    for i in range(10):
        assert i in cluster_risk_set(ds, s, 0, ds.time[i])


def test_risk_set_cluster_restriction():
    ds = _ds([1.0, 2.0, 3.0], [1, 1, 1])
    np.testing.assert_array_equal(cluster_risk_set(ds, np.array([1, 1, 2]), 1, 0.0), [0, 1])


def test_risk_set_empty_cluster_errors():
    ds = _ds([1.0, 2.0, 3.0], [1, 1, 1])
    with pytest.raises(ValueError):
        cluster_risk_set(ds, np.zeros(3, int), 5, 0.0)


# -- partial likelihood values -----------------------------------------------


def test_pl_beta_zero_three_events():
    ds = _ds([1.0, 2.0, 3.0], [1, 1, 1])
    val = cluster_partial_log_lik(np.zeros(1), ds, np.zeros(3, int), EXPOSURE_ONLY)
    assert val == pytest.approx(-np.log(6.0), abs=1e-12)
    assert val == pytest.approx(-1.79176, abs=1e-5)


def test_pl_single_subject_is_zero():
    ds = Dataset(
        ids=np.array([1]), time=np.array([2.0]), event=np.array([1]), exposure=np.array([3.0]),
        z=np.zeros((1, 0)), v=np.zeros((1, 0)),
    )
    assert cluster_partial_log_lik(np.array([0.7]), ds, np.zeros(1, int), EXPOSURE_ONLY) == 0.0


def test_pl_two_subjects_hand_enumeration():
    # risk set at t=1 is {1,2} with weights (2, 1); at t=2 only {2}
    ds = _ds([1.0, 2.0], [1, 1], a=[1.0, 0.0])
    val = cluster_partial_log_lik(OutcomeCoefficients(np.log(2.0)), ds, np.zeros(2, int), EXPOSURE_ONLY)
    assert val == pytest.approx(np.log(2 / 3), abs=1e-12)
    assert val == pytest.approx(-0.405465, abs=1e-6)


def test_pl_matches_brute_force_with_ties_and_clusters(rng):
    for _ in range(20):
        n = int(rng.integers(2, 25))
        ds = make_random_dataset(rng, n, ties=True)
        s = rng.integers(0, 3, n)
        beta = rng.normal(0, 1, 3)
        got = cluster_partial_log_lik(beta, ds, s)
        want = brute_partial_log_lik(beta, ds.design(), ds.time, ds.event, s)
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_pl_no_overflow_for_large_linear_predictor():
    a = np.array([20.0, 25.0, 30.0])
    ds = _ds([1.0, 2.0, 3.0], [1, 1, 1], a=a)
    val = cluster_partial_log_lik(np.array([50.0]), ds, np.zeros(3, int), EXPOSURE_ONLY)
    assert np.isfinite(val)
    want = brute_partial_log_lik(np.array([0.5]), a[:, None], ds.time, ds.event, np.zeros(3))
    # rescaled exposure keeps brute force finite: same eta as beta=50 on a/100
    ds2 = _ds([1.0, 2.0, 3.0], [1, 1, 1], a=a / 100)
    assert cluster_partial_log_lik(np.array([5000.0]), ds2, np.zeros(3, int), EXPOSURE_ONLY) == pytest.approx(val)
    assert np.isfinite(want)


def test_pl_invariant_to_relabel_and_permutation(rng):
    ds = make_random_dataset(rng, 15)
    s = rng.integers(0, 4, 15)
    beta = rng.normal(0, 1, 3)
    base = cluster_partial_log_lik(beta, ds, s)
    relabel = np.array([7, 2, 9, 4])[s]
    assert cluster_partial_log_lik(beta, ds, relabel) == pytest.approx(base, rel=1e-12)
    perm = rng.permutation(15)
    ds_p = Dataset.from_arrays(ds.time[perm], ds.event[perm], ds.exposure[perm], ds.z[perm], ds.v[perm])
    assert cluster_partial_log_lik(beta, ds_p, s[perm]) == pytest.approx(base, rel=1e-12)


def test_pl_early_censored_subject_leaves_value_unchanged(rng):
    ds = make_random_dataset(rng, 10)
    s = np.zeros(10, int)
    beta = rng.normal(0, 1, 3)
    base = cluster_partial_log_lik(beta, ds, s)
    t_small = ds.time[ds.event == 1].min() / 2
    ds2 = Dataset.from_arrays(
        np.r_[ds.time, t_small], np.r_[ds.event, 0], np.r_[ds.exposure, 1.0],
        np.vstack([ds.z, [[0.3]]]), np.vstack([ds.v, [[1.0]]]),
    )
    assert cluster_partial_log_lik(beta, ds2, np.zeros(11, int)) == pytest.approx(base, rel=1e-12)


def test_pl_late_censored_subject_decreases_value_at_beta_zero(rng):
    ds = make_random_dataset(rng, 10)
    base = cluster_partial_log_lik(np.zeros(3), ds, np.zeros(10, int))
    t_big = ds.time.max() + 1
    ds2 = Dataset.from_arrays(
        np.r_[ds.time, t_big], np.r_[ds.event, 0], np.r_[ds.exposure, 1.0],
        np.vstack([ds.z, [[0.3]]]), np.vstack([ds.v, [[1.0]]]),
    )
    assert cluster_partial_log_lik(np.zeros(3), ds2, np.zeros(11, int)) < base


# -- subject term ------------------------------------------------------------


def test_subject_term_censored_is_zero(rng):
    ds = make_random_dataset(rng, 8)
    i = int(np.flatnonzero(ds.event == 0)[0])
    for k in range(3):
        assert subject_partial_log_lik_term(np.ones(3), ds, np.zeros(8, int), i, k) == 0.0


def test_subject_term_fresh_singleton_is_zero(rng):
    ds = make_random_dataset(rng, 8)
    i = int(np.flatnonzero(ds.event == 1)[0])
    assert subject_partial_log_lik_term(np.ones(3), ds, np.zeros(8, int), i, 99) == 0.0


def test_subject_term_earliest_event_risk_set_of_three():
    ds = _ds([1.0, 2.0, 3.0], [1, 1, 1])
    val = subject_partial_log_lik_term(np.zeros(1), ds, np.zeros(3, int), 0, 0, EXPOSURE_ONLY)
    assert val == pytest.approx(-np.log(3.0), abs=1e-12)


def test_subject_terms_sum_to_cluster_pl(rng):
    ds = make_random_dataset(rng, 12, ties=True)
    s = rng.integers(0, 3, 12)
    beta = rng.normal(0, 1, 3)
    total = sum(subject_partial_log_lik_term(beta, ds, s, i, s[i]) for i in range(12))
    assert total == pytest.approx(cluster_partial_log_lik(beta, ds, s), rel=1e-12)


# -- gradient ----------------------------------------------------------------


def test_gradient_event_free_subject_is_zero():
    ds = Dataset(
        ids=np.array([1]), time=np.array([2.0]), event=np.array([0]), exposure=np.array([3.0]),
        z=np.zeros((1, 1)), v=np.zeros((1, 1)),
    )
    np.testing.assert_array_equal(partial_log_lik_gradient(np.ones(3), ds, np.zeros(1, int)), np.zeros(3))


def test_gradient_balanced_two_arm_score():
    # identical event pattern in both arms: a = (1,0,1,0), times (1,1,2,2)
    times = np.array([1.0, 1.0, 2.0, 2.0])
    a = np.array([1.0, 0.0, 1.0, 0.0])
    ds = _ds(times, [1, 1, 1, 1], a=a)
    g = partial_log_lik_gradient(np.zeros(1), ds, np.zeros(4, int), EXPOSURE_ONLY)
    # each event contributes a_i - mean(a over risk set)
    expected = sum(a[i] - a[times >= times[i]].mean() for i in range(4))
    assert g[0] == pytest.approx(expected, abs=1e-12)
    assert g[0] == pytest.approx(0.0, abs=1e-12)


def _fd_grad(f, b, h=1e-5):
    g = np.zeros_like(b)
    for j in range(b.size):
        e = np.zeros_like(b)
        e[j] = h
        g[j] = (f(b + e) - f(b - e)) / (2 * h)
    return g


def test_gradient_and_hessian_match_finite_differences(rng):
    for _ in range(10):
        n = int(rng.integers(3, 30))
        ds = make_random_dataset(rng, n, ties=bool(rng.integers(2)))
        s = rng.integers(0, 3, n)
        beta = rng.normal(0, 0.5, 3)
        g = partial_log_lik_gradient(beta, ds, s)
        fd = _fd_grad(lambda b: cluster_partial_log_lik(b, ds, s), beta)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-7)
        h = partial_log_lik_hessian(beta, ds, s)
        fdh = np.column_stack([_fd_grad(lambda b: partial_log_lik_gradient(b, ds, s)[j], beta) for j in range(3)])
        np.testing.assert_allclose(h, fdh, rtol=1e-5, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(2, 20),
    seed=st.integers(0, 2**31 - 1),
    scale=st.floats(0.0, 3.0),
)
def test_pl_property_matches_brute_force(n, seed, scale):
    r = np.random.default_rng(seed)
    ds = make_random_dataset(r, n, ties=True)
    s = r.integers(0, 3, n)
    beta = r.normal(0, 1, 3) * scale
    got = cluster_partial_log_lik(beta, ds, s)
    assert got <= 1e-12
    assert got == pytest.approx(brute_partial_log_lik(beta, ds.design(), ds.time, ds.event, s), rel=1e-10, abs=1e-10)
