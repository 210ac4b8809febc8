"""Reference estimators: naive and infeasible Cox fits, 2SLS and 2SRI.

All second stages share one Newton-Raphson maximiser of the Breslow partial
likelihood. 2SRI optionally adds a subject-level Gaussian log-frailty fitted
by penalised partial likelihood; the frailty variance maximises the
Laplace-approximate restricted likelihood over a bounded interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import linalg, optimize, stats

from .data import INFEASIBLE_DESIGN, NAIVE_DESIGN, Dataset, DesignSelector
from .partial_likelihood import partial_log_lik, partial_log_lik_derivatives


class NonIdentifiableError(ValueError):
    """A design column carries no information about the coefficients."""


@dataclass
class FitResult:
    estimate: np.ndarray
    se: np.ndarray
    ci_level: float
    ci: np.ndarray  # (p, 2)
    converged: bool
    iterations: int
    names: list[str] = field(default_factory=list)
    loglik: float = float("nan")
    extra: dict = field(default_factory=dict)

    def rows(self, method: str) -> list[dict]:
        return [
            {
                "method": method,
                "param": self.names[j] if j < len(self.names) else f"b{j + 1}",
                "estimate": float(self.estimate[j]),
                "se": float(self.se[j]),
                "lo": float(self.ci[j, 0]),
                "hi": float(self.ci[j, 1]),
                "converged": int(self.converged),
            }
            for j in range(self.estimate.shape[0])
        ]


def _wald(estimate: np.ndarray, cov: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    se = np.sqrt(np.clip(np.diag(cov), 0.0, np.inf))
    zq = stats.norm.ppf(0.5 + level / 2)
    return se, np.column_stack([estimate - zq * se, estimate + zq * se])


def _check_identifiable(x: np.ndarray, event: np.ndarray, names: list[str]) -> None:
    for j in range(x.shape[1]):
        if np.ptp(x[:, j]) == 0:
            label = names[j] if j < len(names) else f"column {j}"
            raise NonIdentifiableError(f"non-identifiable: {label} is constant")


def newton_cox(
    x: np.ndarray,
    time: np.ndarray,
    event: np.ndarray,
    *,
    init: np.ndarray | None = None,
    strata: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    max_halvings: int = 30,
    trace: list[float] | None = None,
) -> tuple[np.ndarray, np.ndarray, float, bool, int]:
    """Maximise the Breslow partial likelihood (optionally stratified).

    Returns ``(beta, hessian, loglik, converged, iterations)``. Steps are
    halved until the objective does not decrease, so iterates are monotone.
    If ``trace`` is given, the objective at every iterate is appended to it.
    """
    p = x.shape[1]
    beta = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()
    ll, g, h = partial_log_lik_derivatives(beta, x, time, event, strata)
    if trace is not None:
        trace.append(ll)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g), initial=0.0) < tol:
            converged = True
            it -= 1
            break
        try:
            step = linalg.solve(-h, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(-h, g)[0]
        t = 1.0
        for _ in range(max_halvings):
            cand = beta + t * step
            ll_c = partial_log_lik(cand, x, time, event, strata)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        beta = cand
        ll, g, h = partial_log_lik_derivatives(beta, x, time, event, strata)
        if trace is not None:
            trace.append(ll)
    else:
        converged = np.max(np.abs(g), initial=0.0) < tol
    return beta, h, ll, bool(converged), it


def _fit_design(
    x: np.ndarray, ds: Dataset, names: list[str], level: float, strata: np.ndarray | None = None
) -> FitResult:
    _check_identifiable(x, ds.event, names)
    beta, h, ll, converged, it = newton_cox(x, ds.time, ds.event, strata=strata)
    try:
        cov = linalg.inv(-h)
    except linalg.LinAlgError:
        cov = np.full((x.shape[1], x.shape[1]), np.nan)
        converged = False
    se, ci = _wald(beta, cov, level)
    if not np.all(np.isfinite(se)) or np.any(se <= 0):
        converged = False
    # monotone likelihood: the score vanishes only as beta runs off to infinity
    diverged = bool(np.any(se * x.std(axis=0) > 1e3))
    res = FitResult(beta, se, level, ci, converged and not diverged, it, names, ll)
    res.extra["diverged"] = diverged
    return res


def fit_cox_mle(ds: Dataset, sel: DesignSelector = NAIVE_DESIGN, level: float = 0.95) -> FitResult:
    """Ordinary Cox fit on the selected design (first coefficient = exposure)."""
    return _fit_design(ds.design(sel), ds, ds.column_names(sel), level)


def fit_naive(ds: Dataset, level: float = 0.95) -> FitResult:
    return fit_cox_mle(ds, NAIVE_DESIGN, level)


def fit_infeasible(
    ds: Dataset, level: float = 0.95, u_mode: Literal["strata", "dummies"] = "strata"
) -> FitResult:
    """Cox fit that also adjusts for the true cluster label.

    ``u_mode="strata"`` gives each U level its own baseline hazard;
    ``"dummies"`` enters U as indicator covariates instead.
    """
    if ds.true_cluster is None:
        raise ValueError("infeasible fit needs true_cluster")
    if u_mode == "dummies":
        return fit_cox_mle(ds, INFEASIBLE_DESIGN, level)
    if u_mode != "strata":
        raise ValueError(f"unknown u_mode {u_mode!r}")
    return _fit_design(ds.design(NAIVE_DESIGN), ds, ds.column_names(NAIVE_DESIGN), level, strata=ds.true_cluster)


@dataclass
class OLSResult:
    coef: np.ndarray
    fitted: np.ndarray
    resid: np.ndarray


def fit_ols(ds: Dataset, design: np.ndarray | None = None) -> OLSResult:
    """First-stage linear model of exposure on (1, z, v) via a pivoted QR solve."""
    x = np.column_stack([np.ones(ds.n), ds.z, ds.v]) if design is None else np.asarray(design, dtype=float)
    q, r, piv = linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() <= diag.max() * max(x.shape) * np.finfo(float).eps:
        raise np.linalg.LinAlgError("rank-deficient first-stage design")
    coef = np.empty(x.shape[1])
    coef[piv] = linalg.solve_triangular(r, q.T @ ds.exposure)
    fitted = x @ coef
    return OLSResult(coef, fitted, ds.exposure - fitted)


def fit_2sls(ds: Dataset, level: float = 0.95) -> FitResult:
    """Cox fit with the exposure replaced by its first-stage prediction.

    Standard errors are the second-stage model-based ones, uncorrected for
    the generated regressor.
    """
    first = fit_ols(ds)
    x = np.column_stack([first.fitted, ds.v])
    names = ["exposure_hat"] + [f"v{j + 1}" for j in range(ds.dim_v)]
    res = _fit_design(x, ds, names, level)
    res.extra["first_stage"] = first.coef
    return res


def _frailty_derivatives(coef: np.ndarray, x: np.ndarray, time: np.ndarray, event: np.ndarray):
    """Partial log-likelihood, score and Hessian for design ``[x, I_n]``.

    With one frailty per subject the Hessian block is
    ``M = diag(w * B) - (w w^T) * min(C_l, C_m)`` where ``B`` and ``C`` are the
    running sums of ``1/S`` and ``1/S^2`` over event times up to each subject's
    time, so no (n x n x n) tensor is ever formed.
    """
    n, p = x.shape
    eta = x @ coef[:p] + coef[p:]
    order = np.argsort(time, kind="stable")
    ts, es = time[order], event[order].astype(float)
    shift = eta.max()
    w_sorted = np.exp(eta[order] - shift)
    # risk sums S(T_i) = sum_{T_l >= T_i} w_l, tie-closed
    rev = np.cumsum(w_sorted[::-1])[::-1]
    first = np.searchsorted(ts, ts, side="left")
    s0 = rev[first]
    ll = float(np.sum(es * (eta[order] - shift - np.log(s0))))
    inc_b = np.where(es > 0, 1.0 / s0, 0.0)
    inc_c = np.where(es > 0, 1.0 / s0**2, 0.0)
    last = np.searchsorted(ts, ts, side="right") - 1
    b_cum = np.cumsum(inc_b)[last]
    c_cum = np.cumsum(inc_c)[last]
    inv = np.empty(n, dtype=np.int64)
    inv[order] = np.arange(n)
    w = w_sorted[inv]
    bv = b_cum[inv]
    cv = c_cum[inv]
    resid = event - w * bv  # martingale residuals
    m = -(np.outer(w, w) * np.minimum.outer(cv, cv))
    m[np.diag_indices(n)] += w * bv
    xm = x.T @ m
    grad = np.r_[x.T @ resid, resid]
    hess = np.empty((p + n, p + n))
    hess[:p, :p] = -(xm @ x)
    hess[:p, p:] = -xm
    hess[p:, :p] = -xm.T
    hess[p:, p:] = -m
    return ll, grad, hess


def _frailty_newton(
    x: np.ndarray,
    time: np.ndarray,
    event: np.ndarray,
    theta: float,
    init: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 50,
):
    """Penalised Newton for (beta, b) with log-hazard x beta + b_i and b ~ N(0, theta)."""
    n, p = x.shape
    pen = np.r_[np.zeros(p), np.full(n, 1.0 / theta)]
    coef = init.copy()
    ll, g, h = _frailty_derivatives(coef, x, time, event)
    obj = ll - 0.5 * np.sum(pen * coef * coef)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gp = g - pen * coef
        hp = h - np.diag(pen)
        if np.max(np.abs(gp)) < tol:
            converged = True
            break
        step = linalg.solve(-hp, gp, assume_a="pos")
        t = 1.0
        for _ in range(30):
            cand = coef + t * step
            ll_c, g_c, h_c = _frailty_derivatives(cand, x, time, event)
            oc = ll_c - 0.5 * np.sum(pen * cand * cand)
            if np.isfinite(oc) and oc >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        else:
            break
        coef, ll, g, h, obj = cand, ll_c, g_c, h_c, oc
    hp = h - np.diag(pen)
    return coef, hp, obj, converged, it


def fit_2sri(
    ds: Dataset,
    frailty: Literal["none", "lognormal"] = "lognormal",
    level: float = 0.95,
    theta_tol: float = 1e-4,
    max_outer: int = 100,
    theta_bounds: tuple[float, float] = (math.log(1e-6), math.log(10.0)),
) -> FitResult:
    """Two-stage residual inclusion: Cox on (A, v, first-stage residual).

    With ``frailty="lognormal"`` each subject gets a Gaussian log-frailty
    b_i ~ N(0, theta).  theta maximises the Laplace-approximated restricted
    likelihood ``PPL - n/2 log theta - 1/2 log det(-H)``, whose stationary
    point is ``theta = (sum b_i^2 + tr[H^-1]_bb) / n``.
    """
    first = fit_ols(ds)
    x = np.column_stack([ds.exposure, ds.v, first.resid])
    names = ["exposure"] + [f"v{j + 1}" for j in range(ds.dim_v)] + ["resid"]
    if np.ptp(first.resid) <= 1e-10 * max(1.0, float(np.ptp(ds.exposure))):
        # exposure fully explained by the first stage: the residual carries no information
        x, names = x[:, :-1], names[:-1]
    if frailty == "none":
        res = _fit_design(x, ds, names, level)
        res.extra["first_stage"] = first.coef
        return res
    if frailty != "lognormal":
        raise ValueError(f"unknown frailty {frailty!r}")
    _check_identifiable(x, ds.event, names)
    n, p = x.shape
    beta0, *_ = newton_cox(x, ds.time, ds.event)
    warm = {"coef": np.r_[beta0, np.zeros(n)]}

    def neg_marginal(log_theta: float) -> float:
        coef, hp, obj, ok, _ = _frailty_newton(x, ds.time, ds.event, math.exp(log_theta), warm["coef"])
        sign, logdet = np.linalg.slogdet(-hp)
        if not (ok and sign > 0 and np.isfinite(obj)):
            return np.inf
        warm["coef"] = coef
        return -(obj - 0.5 * n * log_theta - 0.5 * logdet)

    opt = optimize.minimize_scalar(
        neg_marginal, bounds=theta_bounds, method="bounded", options={"xatol": theta_tol, "maxiter": max_outer}
    )
    theta = math.exp(opt.x)
    coef, hp, obj, inner_ok, it = _frailty_newton(x, ds.time, ds.event, theta, warm["coef"])
    cov = linalg.inv(-hp)[:p, :p]
    beta = coef[:p]
    se, ci = _wald(beta, cov, level)
    res = FitResult(beta, se, level, ci, bool(opt.success and inner_ok), int(opt.nfev), names, obj)
    res.extra.update(first_stage=first.coef, theta=theta)
    return res
