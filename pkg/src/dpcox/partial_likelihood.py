"""Clustered Cox partial likelihood (Breslow ties) with analytic score and Hessian.

Every cluster acts as a stratum with its own baseline hazard; risk sets are
closed at the event time (T_l >= T_i) and never cross cluster boundaries.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .data import FULL_DESIGN, Dataset, DesignSelector, OutcomeCoefficients, as_beta_vector


def cluster_risk_set(ds: Dataset, s: np.ndarray, k: int, t: float) -> np.ndarray:
    """Indices ``{i : s_i == k and T_i >= t}`` in increasing subject order."""
    s = np.asarray(s)
    if not np.any(s == k):
        raise ValueError(f"cluster {k} is empty")
    return np.flatnonzero((s == k) & (ds.time >= t))


class _RiskSetOrder(NamedTuple):
    order: np.ndarray  # subjects sorted by (stratum, time descending)
    start: np.ndarray  # per sorted position: first position of its stratum
    tie_end: np.ndarray  # per sorted position: last position sharing (stratum, time)


def _risk_set_order(time: np.ndarray, strata: np.ndarray) -> _RiskSetOrder:
    order = np.lexsort((-time, strata))
    st = strata[order]
    tt = time[order]
    n = order.shape[0]
    new_stratum = np.ones(n, dtype=bool)
    new_stratum[1:] = st[1:] != st[:-1]
    start = np.maximum.accumulate(np.where(new_stratum, np.arange(n), 0))
    new_run = new_stratum.copy()
    new_run[1:] |= tt[1:] != tt[:-1]
    run_id = np.cumsum(new_run) - 1
    run_last = np.flatnonzero(np.r_[new_run[1:], True])
    return _RiskSetOrder(order, start, run_last[run_id])


def _risk_cumsum(vals: np.ndarray, ro: _RiskSetOrder) -> np.ndarray:
    """Per subject (sorted order), sum of ``vals`` over its stratum's risk set."""
    v = vals[ro.order]
    c = np.cumsum(v, axis=0)
    before = np.where(
        (ro.start > 0).reshape((-1,) + (1,) * (v.ndim - 1)),
        c[np.maximum(ro.start - 1, 0)],
        0.0,
    )
    return c[ro.tie_end] - before


class _PLParts(NamedTuple):
    ro: _RiskSetOrder
    eta: np.ndarray  # sorted
    shift: np.ndarray  # per sorted position: max eta of the stratum
    w: np.ndarray  # exp(eta - shift), sorted
    s0: np.ndarray  # risk-set sum of w, sorted
    delta: np.ndarray  # sorted event flags
    x: np.ndarray  # sorted design


def _parts(beta: np.ndarray, x: np.ndarray, time: np.ndarray, event: np.ndarray, strata: np.ndarray) -> _PLParts:
    ro = _risk_set_order(time, strata)
    xs = x[ro.order]
    eta = xs @ beta if xs.shape[1] else np.zeros(xs.shape[0])
    st = strata[ro.order]
    # per-stratum max keeps every exponent <= 0
    bounds = np.flatnonzero(np.r_[True, st[1:] != st[:-1]])
    smax = np.maximum.reduceat(eta, bounds)
    shift = np.repeat(smax, np.diff(np.r_[bounds, eta.shape[0]]))
    w = np.exp(eta - shift)
    identity = _RiskSetOrder(np.arange(eta.shape[0]), ro.start, ro.tie_end)
    s0 = _risk_cumsum(w, identity)
    return _PLParts(ro, eta, shift, w, s0, event[ro.order].astype(float), xs)


def _log_s0(p: _PLParts) -> np.ndarray:
    # the risk set always contains the subject itself, so log s0 >= eta - shift
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(p.s0), p.eta - p.shift)


def _sorted_identity(p: _PLParts) -> _RiskSetOrder:
    return _RiskSetOrder(np.arange(p.eta.shape[0]), p.ro.start, p.ro.tie_end)


def partial_log_lik(
    beta: np.ndarray, x: np.ndarray, time: np.ndarray, event: np.ndarray, strata: np.ndarray | None = None
) -> float:
    """Stratified Breslow partial log-likelihood on a raw design matrix."""
    if strata is None:
        strata = np.zeros(time.shape[0], dtype=np.int64)
    p = _parts(np.asarray(beta, dtype=float), np.asarray(x, dtype=float), time, event, np.asarray(strata))
    return float(np.sum(p.delta * (p.eta - p.shift - _log_s0(p))))


def partial_log_lik_derivatives(
    beta: np.ndarray, x: np.ndarray, time: np.ndarray, event: np.ndarray, strata: np.ndarray | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, score vector and Hessian of the stratified partial log-likelihood."""
    if strata is None:
        strata = np.zeros(time.shape[0], dtype=np.int64)
    x = np.asarray(x, dtype=float)
    p = _parts(np.asarray(beta, dtype=float), x, time, event, np.asarray(strata))
    ident = _sorted_identity(p)
    value = float(np.sum(p.delta * (p.eta - p.shift - _log_s0(p))))
    wx = p.w[:, None] * p.x
    s1 = _risk_cumsum(wx, ident)
    # a risk sum that underflowed to zero: fall back to the subject's own covariates
    ok = p.s0 > 0
    s0 = np.where(ok, p.s0, 1.0)
    xbar = np.where(ok[:, None], s1 / s0[:, None], p.x)
    score = np.sum(p.delta[:, None] * (p.x - xbar), axis=0)
    s2 = _risk_cumsum(wx[:, :, None] * p.x[:, None, :], ident)
    d = p.delta[:, None, None]
    second = np.where(ok[:, None, None], s2 / s0[:, None, None], p.x[:, :, None] * p.x[:, None, :])
    hess = -np.sum(d * (second - xbar[:, :, None] * xbar[:, None, :]), axis=0)
    return value, score, hess


def cluster_partial_log_lik(
    beta: OutcomeCoefficients | np.ndarray,
    ds: Dataset,
    s: np.ndarray,
    sel: DesignSelector = FULL_DESIGN,
) -> float:
    """Sum over clusters of the log partial likelihood with cluster-wise risk sets."""
    return partial_log_lik(as_beta_vector(beta), ds.design(sel), ds.time, ds.event, np.asarray(s))


def partial_log_lik_gradient(
    beta: OutcomeCoefficients | np.ndarray,
    ds: Dataset,
    s: np.ndarray,
    sel: DesignSelector = FULL_DESIGN,
) -> np.ndarray:
    _, score, _ = partial_log_lik_derivatives(as_beta_vector(beta), ds.design(sel), ds.time, ds.event, np.asarray(s))
    return score


def partial_log_lik_hessian(
    beta: OutcomeCoefficients | np.ndarray,
    ds: Dataset,
    s: np.ndarray,
    sel: DesignSelector = FULL_DESIGN,
) -> np.ndarray:
    _, _, hess = partial_log_lik_derivatives(as_beta_vector(beta), ds.design(sel), ds.time, ds.event, np.asarray(s))
    return hess


def subject_partial_log_lik_term(
    beta: OutcomeCoefficients | np.ndarray,
    ds: Dataset,
    s: np.ndarray,
    i: int,
    k: int,
    sel: DesignSelector = FULL_DESIGN,
) -> float:
    """log l_ik: subject ``i``'s partial-likelihood factor if it sat in cluster ``k``.

    All other assignments stay as in ``s``. A label not present in ``s``
    (other than through ``i`` itself) is a fresh singleton cluster.
    """
    if ds.event[i] == 0:
        return 0.0
    x = ds.design(sel)
    b = as_beta_vector(beta)
    eta = x @ b if x.shape[1] else np.zeros(ds.n)
    members = (np.asarray(s) == k) & (ds.time >= ds.time[i])
    members[i] = True
    e = eta[members]
    m = e.max()
    return float(eta[i] - m - np.log(np.sum(np.exp(e - m))))
