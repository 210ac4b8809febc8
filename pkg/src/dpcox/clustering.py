"""Dirichlet-process clustering: CRP probabilities, assignment updates, concentration draws.

Cluster labels are 0-based and contiguous (0..K-1). Every subject update
follows the one-auxiliary-component scheme: existing clusters compete with a
single new cluster whose parameters come from the base measure (or, when the
subject was alone, from its own vacated cluster).

Two flavours of the assignment conditional are offered. The default weighs a
candidate cluster by the subject's own partial-likelihood factor only. With
``exact=True`` the full change in the clustered partial likelihood is used,
which also accounts for the subject entering other members' risk sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy.special import gammaln

from .data import FULL_DESIGN, Dataset, DesignSelector
from .partial_likelihood import partial_log_lik, subject_partial_log_lik_term
from .regression import ClusterRegressionParams, PriorConfig, exposure_log_density, inv_gamma


@dataclass
class ClusterState:
    """Assignments and per-cluster exposure-model parameters.

    ``alpha_v`` has shape (K, dim_v); ``sigma2`` has one entry per cluster even
    when variances are shared.
    """

    labels: np.ndarray
    alpha0: np.ndarray
    alpha_v: np.ndarray
    sigma2: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.alpha0.shape[0])

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)

    def params(self, k: int) -> ClusterRegressionParams:
        return ClusterRegressionParams(float(self.alpha0[k]), self.alpha_v[k].copy(), float(self.sigma2[k]))

    def copy(self) -> "ClusterState":
        return ClusterState(self.labels.copy(), self.alpha0.copy(), self.alpha_v.copy(), self.sigma2.copy())

    def check(self) -> None:
        k = self.n_clusters
        if self.alpha_v.shape[0] != k or self.sigma2.shape[0] != k:
            raise AssertionError("parameter arrays out of step with cluster count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            raise AssertionError("label outside 0..K-1")
        if np.any(self.sizes == 0):
            raise AssertionError("empty cluster after compaction")
        if np.any(self.sigma2 <= 0):
            raise AssertionError("nonpositive cluster variance")

    @classmethod
    def single(cls, n: int, alpha0: float, alpha_v: np.ndarray, sigma2: float) -> "ClusterState":
        return cls(
            np.zeros(n, dtype=np.int64),
            np.array([float(alpha0)]),
            np.asarray(alpha_v, dtype=float).reshape(1, -1),
            np.array([float(sigma2)]),
        )


@dataclass(frozen=True)
class ConcentrationState:
    gamma: float
    eta: float = 0.5
    a_gamma: float = 2.0
    b_gamma: float = 4.0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")


def crp_prior_probs(sizes, gamma: float, total: int | None = None) -> np.ndarray:
    """CRP seating probabilities: N_k/(m+gamma) per cluster, then gamma/(m+gamma)."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    sizes = np.asarray(sizes, dtype=float)
    m = float(sizes.sum()) if total is None else float(total)
    if total is not None and not np.isclose(m, sizes.sum()):
        raise ValueError("total must equal the sum of cluster sizes")
    return np.r_[sizes, gamma] / (m + gamma)


def log_crp_partition_prob(labels, gamma: float) -> float:
    """log P(s_1..s_n; gamma) = K log gamma + sum log Gamma(N_k) + log Gamma(gamma) - log Gamma(gamma + n)."""
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    n = int(counts.sum())
    return float(counts.size * math.log(gamma) + gammaln(counts).sum() + gammaln(gamma) - gammaln(gamma + n))


def compact_clusters(state: ClusterState) -> ClusterState:
    """Drop empty clusters and relabel 0..K-1 in order of first occurrence."""
    labels = np.asarray(state.labels)
    if labels.size == 0:
        return ClusterState(labels.copy(), state.alpha0[:0].copy(), state.alpha_v[:0].copy(), state.sigma2[:0].copy())
    _, first = np.unique(labels, return_index=True)
    keep = labels[np.sort(first)]
    remap = np.full(state.n_clusters, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    return ClusterState(remap[labels], state.alpha0[keep].copy(), state.alpha_v[keep].copy(), state.sigma2[keep].copy())


def concentration_mixture_weight(
    a: float, b: float, n_clusters: int, n: int, eta: float, paper_literal: bool = False
) -> float:
    """Weight pi of the Gamma(a + K, b - log eta) component given the auxiliary eta.

    Canonical: odds (a+K-1) / (n (b - log eta)), pi = odds / (1 + odds).
    ``paper_literal``: lambda = (a+K-1) / (K (b - log eta)), pi = logistic(lambda).
    """
    k = n_clusters
    rate = b - math.log(eta)
    if paper_literal:
        lam = (a + k - 1.0) / (k * rate)
        return 1.0 / (1.0 + math.exp(-lam))
    odds = (a + k - 1.0) / (n * rate)
    return odds / (1.0 + odds)


def sample_concentration(
    conc: ConcentrationState,
    n_clusters: int,
    n: int,
    rng: np.random.Generator,
    paper_literal: bool = False,
) -> ConcentrationState:
    """Escobar-West auxiliary-variable update of the DP precision.

    Canonical: eta ~ Beta(gamma+1, n), then gamma from the two-component
    Gamma mixture.  ``paper_literal`` draws eta ~ Beta(a+1, n) and uses the
    logistic weight (see :func:`concentration_mixture_weight`).
    """
    if n_clusters < 1 or n < 1:
        raise ValueError("need at least one cluster and one subject")
    a, b, k = conc.a_gamma, conc.b_gamma, n_clusters
    eta = rng.beta((a if paper_literal else conc.gamma) + 1.0, n)
    # guard against eta landing exactly on the boundary in float arithmetic
    eta = min(max(eta, np.finfo(float).tiny), 1.0 - np.finfo(float).eps)
    rate = b - math.log(eta)
    pi = concentration_mixture_weight(a, b, k, n, eta, paper_literal=paper_literal)
    shape = a + k if rng.random() < pi else a + k - 1.0
    gamma = rng.gamma(shape, 1.0 / rate)
    return replace(conc, gamma=max(float(gamma), np.finfo(float).tiny), eta=float(eta))


# --------------------------------------------------------------------------
# auxiliary draws and sweep context


@dataclass(frozen=True)
class FreshDraws:
    """Base-measure parameters and a uniform for every subject visited in a sweep."""

    alpha0: np.ndarray
    alpha_v: np.ndarray
    sigma2: np.ndarray
    uniform: np.ndarray


def draw_fresh(
    n: int,
    dim_v: int,
    prior: PriorConfig,
    rng: np.random.Generator,
    common_sigma2: float | None = None,
) -> FreshDraws:
    m0, s0 = prior.location_prior(dim_v)
    loc = m0 + np.sqrt(s0) * rng.standard_normal((n, dim_v + 1))
    if common_sigma2 is None:
        s2 = inv_gamma(prior.a_sigma, prior.b_sigma, rng, size=n)
    else:
        s2 = np.full(n, float(common_sigma2))
    u = rng.random(n)
    return FreshDraws(loc[:, 0].copy(), loc[:, 1:].copy(), s2, u)


@dataclass(frozen=True)
class SweepContext:
    """Time ordering of a dataset, shared by every sweep of a chain."""

    order: np.ndarray
    pos: np.ndarray
    tie_start: np.ndarray
    tie_end: np.ndarray

    @classmethod
    def build(cls, time: np.ndarray) -> "SweepContext":
        order = np.argsort(time, kind="stable")
        ts = time[order]
        pos = np.empty_like(order)
        pos[order] = np.arange(order.size)
        tie_start = np.searchsorted(ts, ts, side="left")
        tie_end = np.searchsorted(ts, ts, side="right") - 1
        return cls(order, pos, tie_start.astype(np.int64), tie_end.astype(np.int64))


# --------------------------------------------------------------------------
# reference implementation (one subject, plain numpy)


def assignment_log_weights(
    i: int,
    state: ClusterState,
    gamma: float,
    beta: np.ndarray,
    alpha_z: np.ndarray,
    ds: Dataset,
    aux: ClusterRegressionParams,
    sel: DesignSelector = FULL_DESIGN,
    *,
    exact: bool = False,
    use_outcome: bool = True,
    use_exposure: bool = True,
) -> np.ndarray:
    """Unnormalised log weights for subject ``i`` over clusters 0..K-1 and one new cluster.

    ``state`` must already have ``i`` removed: ``state.labels[i] == -1`` and no
    empty clusters.
    """
    labels = state.labels
    k_n = state.n_clusters
    sizes = np.bincount(labels[labels >= 0], minlength=k_n)
    out = np.empty(k_n + 1)
    z_i = ds.z[i]
    r_i = ds.exposure[i] - z_i @ alpha_z if ds.dim_z else ds.exposure[i]
    if exact and use_outcome:
        x = ds.design(sel)
        others = labels >= 0
        base = partial_log_lik(beta, x[others], ds.time[others], ds.event[others], labels[others])
    for k in range(k_n + 1):
        lw = math.log(sizes[k]) if k < k_n else math.log(gamma)
        if use_outcome:
            if exact:
                trial = labels.copy()
                trial[i] = k
                lw += partial_log_lik(beta, ds.design(sel), ds.time, ds.event, trial) - base
            else:
                trial = labels.copy()
                trial[i] = k
                lw += subject_partial_log_lik_term(beta, ds, trial, i, k, sel)
        if use_exposure:
            p = state.params(k) if k < k_n else aux
            lw += exposure_log_density(r_i, p.alpha0 + ds.v[i] @ p.alpha_v, p.sigma2)
        out[k] = lw
    return out


def sample_assignment(
    i: int,
    state: ClusterState,
    gamma: float,
    beta: np.ndarray,
    alpha_z: np.ndarray,
    ds: Dataset,
    fresh: ClusterRegressionParams,
    u: float,
    sel: DesignSelector = FULL_DESIGN,
    *,
    exact: bool = False,
    reuse_singleton: bool = True,
    use_outcome: bool = True,
    use_exposure: bool = True,
) -> ClusterState:
    """Resample ``s_i`` given everything else; returns a new compact state.

    ``fresh`` are base-measure draws for the new-cluster candidate and ``u`` a
    uniform on (0, 1) used for the categorical draw. When subject ``i`` is the
    only member of its cluster and ``reuse_singleton`` is set, the vacated
    cluster's parameters serve as the candidate instead. Slot bookkeeping
    matches the compiled sweep: an emptied slot is filled by the last cluster.
    """
    st = state.copy()
    k0 = int(st.labels[i])
    st.labels[i] = -1
    aux = fresh
    if not np.any(st.labels == k0):
        if reuse_singleton:
            aux = st.params(k0)
        last = st.n_clusters - 1
        if k0 != last:
            st.alpha0[k0] = st.alpha0[last]
            st.alpha_v[k0] = st.alpha_v[last]
            st.sigma2[k0] = st.sigma2[last]
            st.labels[st.labels == last] = k0
        st = ClusterState(st.labels, st.alpha0[:last], st.alpha_v[:last], st.sigma2[:last])
    lw = assignment_log_weights(
        i, st, gamma, beta, alpha_z, ds, aux, sel, exact=exact, use_outcome=use_outcome, use_exposure=use_exposure
    )
    if not np.any(np.isfinite(lw)):
        raise AssertionError("all assignment weights are -inf")
    p = np.exp(lw - lw.max())
    cum = np.cumsum(p)
    k = int(np.searchsorted(cum, u * cum[-1], side="right"))
    k = min(k, lw.size - 1)
    if k == st.n_clusters:
        st = ClusterState(
            st.labels,
            np.r_[st.alpha0, aux.alpha0],
            np.vstack([st.alpha_v, np.asarray(aux.alpha_v, dtype=float).reshape(1, -1)]),
            np.r_[st.sigma2, aux.sigma2],
        )
    st.labels[i] = k
    return st


# --------------------------------------------------------------------------
# compiled sweep


@njit(cache=True)
def _own_risk(order, tie_start, labels, w, k_cap):
    # risk[j] = sum of w over members of j's cluster with time >= T_j
    n = order.shape[0]
    run = np.zeros(k_cap)
    risk = np.empty(n)
    p = n - 1
    while p >= 0:
        g0 = tie_start[p]
        for q in range(g0, p + 1):
            j = order[q]
            run[labels[j]] += w[j]
        for q in range(g0, p + 1):
            j = order[q]
            risk[j] = run[labels[j]]
        p = g0 - 1
    return risk


@njit(cache=True)
def _sweep_kernel(
    visit, order, pos, tie_start, tie_end,
    event, logw, w, resid, v,
    labels, alpha0, alpha_v, sigma2, n_clusters, log_gamma,
    fresh_a0, fresh_av, fresh_s2, unif,
    use_outcome, use_exposure, exact, reuse_singleton, per_sweep,
):
    n = labels.shape[0]
    q = v.shape[1]
    cap = alpha0.shape[0]
    sizes = np.zeros(cap, dtype=np.int64)
    for j in range(n):
        sizes[labels[j]] += 1
    big_k = n_clusters
    risk = _own_risk(order, tie_start, labels, w, cap) if exact else np.zeros(1)
    s_at = np.zeros(cap)
    extra = np.zeros(cap)
    lw = np.zeros(cap + 1)
    aux_av = np.empty(q)
    half_log2pi = 0.5 * math.log(2.0 * math.pi)
    c = 0  # index of the current new-cluster candidate
    for t in range(visit.shape[0]):
        i = visit[t]
        if not per_sweep:
            c = t
        k0 = labels[i]
        sizes[k0] -= 1
        p_i = pos[i]
        te = tie_end[p_i]
        if exact:
            for p in range(te + 1):
                j = order[p]
                if j != i and labels[j] == k0:
                    risk[j] -= w[i]
        if sizes[k0] == 0:
            if reuse_singleton:
                aux_a0 = alpha0[k0]
                for d in range(q):
                    aux_av[d] = alpha_v[k0, d]
                aux_s2 = sigma2[k0]
            else:
                aux_a0 = fresh_a0[c]
                for d in range(q):
                    aux_av[d] = fresh_av[c, d]
                aux_s2 = fresh_s2[c]
            last = big_k - 1
            if k0 != last:
                alpha0[k0] = alpha0[last]
                for d in range(q):
                    alpha_v[k0, d] = alpha_v[last, d]
                sigma2[k0] = sigma2[last]
                sizes[k0] = sizes[last]
                for j in range(n):
                    if labels[j] == last:
                        labels[j] = k0
            sizes[last] = 0
            big_k -= 1
        else:
            aux_a0 = fresh_a0[c]
            for d in range(q):
                aux_av[d] = fresh_av[c, d]
            aux_s2 = fresh_s2[c]
        labels[i] = -1

        for k in range(big_k):
            s_at[k] = 0.0
            extra[k] = 0.0
        if use_outcome:
            for p in range(tie_start[p_i], n):
                j = order[p]
                if j != i:
                    s_at[labels[j]] += w[j]
            if exact:
                for p in range(te + 1):
                    j = order[p]
                    if j != i and event[j] == 1:
                        extra[labels[j]] += math.log(risk[j]) - math.log(risk[j] + w[i])

        for k in range(big_k + 1):
            if k < big_k:
                val = math.log(sizes[k])
            else:
                val = log_gamma
            if use_outcome:
                if k < big_k:
                    if event[i] == 1:
                        val += logw[i] - math.log(s_at[k] + w[i])
                    if exact:
                        val += extra[k]
            if use_exposure:
                if k < big_k:
                    mu = alpha0[k]
                    for d in range(q):
                        mu += v[i, d] * alpha_v[k, d]
                    s2 = sigma2[k]
                else:
                    mu = aux_a0
                    for d in range(q):
                        mu += v[i, d] * aux_av[d]
                    s2 = aux_s2
                r = resid[i] - mu
                val += -half_log2pi - 0.5 * math.log(s2) - 0.5 * r * r / s2
            lw[k] = val

        m = lw[0]
        for k in range(1, big_k + 1):
            if lw[k] > m:
                m = lw[k]
        tot = 0.0
        for k in range(big_k + 1):
            lw[k] = math.exp(lw[k] - m)
            tot += lw[k]
        target = unif[t] * tot
        acc = 0.0
        choice = big_k
        for k in range(big_k + 1):
            acc += lw[k]
            if target < acc:
                choice = k
                break

        opened = choice == big_k
        if opened and per_sweep:
            c += 1
        if opened:
            alpha0[big_k] = aux_a0
            for d in range(q):
                alpha_v[big_k, d] = aux_av[d]
            sigma2[big_k] = aux_s2
            sizes[big_k] = 0
            big_k += 1
        labels[i] = choice
        sizes[choice] += 1
        if exact:
            for p in range(te + 1):
                j = order[p]
                if j != i and labels[j] == choice:
                    risk[j] += w[i]
            risk[i] = w[i] if opened else s_at[choice] + w[i]
    return big_k


def sweep_assignments(
    state: ClusterState,
    ds: Dataset,
    eta: np.ndarray,
    alpha_z: np.ndarray,
    gamma: float,
    fresh: FreshDraws,
    ctx: SweepContext | None = None,
    *,
    visit: np.ndarray | None = None,
    exact: bool = False,
    reuse_singleton: bool = True,
    use_outcome: bool = True,
    use_exposure: bool = True,
    per_sweep: bool = False,
) -> ClusterState:
    """One systematic scan over subjects (compiled), returning a compacted state.

    ``eta`` is the outcome linear predictor. ``fresh`` supplies the new-cluster
    candidate and the uniform for the t-th visited subject.
    """
    n = ds.n
    ctx = SweepContext.build(ds.time) if ctx is None else ctx
    visit = np.arange(n, dtype=np.int64) if visit is None else np.asarray(visit, dtype=np.int64)
    if fresh.uniform.shape[0] < visit.shape[0]:
        raise ValueError("not enough fresh draws for the visit sequence")
    cap = n + 1
    q = ds.dim_v
    k_n = state.n_clusters
    alpha0 = np.zeros(cap)
    alpha_v = np.zeros((cap, q))
    sigma2 = np.ones(cap)
    alpha0[:k_n] = state.alpha0
    alpha_v[:k_n] = state.alpha_v
    sigma2[:k_n] = state.sigma2
    labels = state.labels.astype(np.int64).copy()
    logw = eta - eta.max()
    w = np.exp(logw)
    resid = ds.exposure - (ds.z @ alpha_z if ds.dim_z else 0.0)
    new_k = _sweep_kernel(
        visit, ctx.order, ctx.pos, ctx.tie_start, ctx.tie_end,
        ds.event.astype(np.int64), logw, w, np.ascontiguousarray(resid, dtype=float),
        np.ascontiguousarray(ds.v, dtype=float),
        labels, alpha0, alpha_v, sigma2, k_n, math.log(gamma),
        np.ascontiguousarray(fresh.alpha0), np.ascontiguousarray(fresh.alpha_v).reshape(fresh.alpha0.shape[0], q),
        np.ascontiguousarray(fresh.sigma2), np.ascontiguousarray(fresh.uniform),
        use_outcome, use_exposure, exact, reuse_singleton, per_sweep,
    )
    out = ClusterState(labels, alpha0[:new_k].copy(), alpha_v[:new_k].copy(), sigma2[:new_k].copy())
    return compact_clusters(out)
