"""General-Bayes Gibbs sampler over the clustered partial likelihood.

One sweep updates, in order: alpha_z, cluster locations, variances,
assignments, the DP precision and finally beta. beta is moved by
Metropolis-Hastings on ``clustered PL(beta) + log prior`` with a proposal
preconditioned by the inverse observed information; the preconditioner and
step scale adapt during burn-in and are frozen afterwards.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np
from scipy import linalg, stats
from scipy.special import gammaln

from .clustering import (
    ClusterState,
    ConcentrationState,
    SweepContext,
    draw_fresh,
    log_crp_partition_prob,
    sample_concentration,
    sweep_assignments,
)
from .data import FULL_DESIGN, Dataset, DesignSelector
from .partial_likelihood import partial_log_lik, partial_log_lik_derivatives
from .regression import (
    LOG_2PI,
    HorseshoeState,
    PriorConfig,
    sample_cluster_locations,
    sample_cluster_variances,
    sample_common_variance,
    sample_global_alpha_z,
    sample_horseshoe_locals,
)


class ConfigError(ValueError):
    """An MCMC setting violates its invariants."""


@dataclass(frozen=True)
class McmcConfig:
    total_iters: int = 1200
    burn_in: int = 200
    seed: int = 0
    beta_step: float = 1.0
    beta_sampler: Literal["random-walk", "langevin"] = "random-walk"
    thin: int = 1
    exact_assignment: bool = False
    paper_literal_gamma: bool = False
    homogeneous_sigma: bool = False
    # extra knobs
    beta_substeps: int = 5
    reuse_singleton: bool = False
    new_cluster_draws: Literal["per-subject", "per-sweep"] = "per-subject"
    outcome_in_assignment: bool = True
    adapt_every: int = 25
    gamma_init: float = 1.0

    def __post_init__(self) -> None:
        if self.total_iters < 1:
            raise ConfigError("total_iters must be positive")
        if not 0 <= self.burn_in < self.total_iters:
            raise ConfigError("burn_in < total_iters violated")
        if self.thin < 1:
            raise ConfigError("thin must be at least 1")
        if not self.beta_step > 0:
            raise ConfigError("beta_step must be positive")
        if self.beta_sampler not in ("random-walk", "langevin"):
            raise ConfigError(f"unknown beta_sampler {self.beta_sampler!r}")
        if self.beta_substeps < 1:
            raise ConfigError("beta_substeps must be at least 1")
        if not self.gamma_init > 0:
            raise ConfigError("gamma_init must be positive")
        if self.new_cluster_draws not in ("per-subject", "per-sweep"):
            raise ConfigError(f"unknown new_cluster_draws {self.new_cluster_draws!r}")

    @property
    def n_retained(self) -> int:
        return len(range(self.burn_in, self.total_iters, self.thin))

    @property
    def target_accept(self) -> float:
        return 0.3 if self.beta_sampler == "random-walk" else 0.57


@dataclass
class ChainState:
    beta: np.ndarray
    alpha_z: np.ndarray
    clusters: ClusterState
    conc: ConcentrationState
    horseshoe: HorseshoeState | None = None
    logpl: float = float("nan")  # clustered PL at (beta, labels), kept current by the beta step


@dataclass
class BetaProposal:
    """Preconditioned proposal for beta: covariance ``scale^2 * cov``."""

    chol: np.ndarray
    scale: float
    adapting: bool = True
    n_prop: int = 0
    n_acc: int = 0

    @classmethod
    def identity(cls, p: int, scale: float) -> "BetaProposal":
        return cls(np.eye(p), scale)

    @property
    def cov(self) -> np.ndarray:
        return self.chol @ self.chol.T

    @property
    def acceptance_rate(self) -> float:
        return self.n_acc / self.n_prop if self.n_prop else float("nan")


@dataclass
class Model:
    """Dataset-derived quantities used by every sweep."""

    ds: Dataset
    x: np.ndarray
    names: list[str]
    prior: PriorConfig
    ctx: SweepContext

    @classmethod
    def build(cls, ds: Dataset, prior: PriorConfig, sel: DesignSelector = FULL_DESIGN) -> "Model":
        return cls(ds, ds.design(sel), ds.column_names(sel), prior, SweepContext.build(ds.time))

    @property
    def p(self) -> int:
        return self.x.shape[1]


def _beta_prior(model: Model, hs: HorseshoeState | None) -> tuple[np.ndarray, np.ndarray]:
    if model.prior.horseshoe_beta and hs is not None:
        return np.zeros(model.p), hs.psi2**2 * model.prior.tau2**2
    return model.prior.beta_prior(model.p)


def _alpha_z_prior(model: Model, hs: HorseshoeState | None) -> tuple[np.ndarray, np.ndarray]:
    q = model.ds.dim_z
    if model.prior.horseshoe_alpha_z and hs is not None:
        return np.zeros(q), hs.psi1**2 * model.prior.tau1**2
    return np.full(q, model.prior.m_alpha_z), np.full(q, model.prior.s2_alpha_z)


def _log_normal(x, mean, var) -> float:
    x = np.asarray(x, dtype=float)
    return float(-0.5 * np.sum(LOG_2PI + np.log(var) + (x - mean) ** 2 / var))


def _log_beta_target(beta, model: Model, labels, mean, var) -> tuple[float, float]:
    lp = partial_log_lik(beta, model.x, model.ds.time, model.ds.event, labels)
    return lp + _log_normal(beta, mean, var), lp


def sample_beta(
    state: ChainState,
    model: Model,
    proposal: BetaProposal,
    config: McmcConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """``config.beta_substeps`` MH moves for beta given the current assignments.

    Returns the new beta and the clustered log partial likelihood there.
    Non-finite proposals are rejected.
    """
    labels = state.clusters.labels
    mean, var = _beta_prior(model, state.horseshoe)
    beta = state.beta.copy()
    cur, cur_pl = _log_beta_target(beta, model, labels, mean, var)
    langevin = config.beta_sampler == "langevin"
    if langevin:
        cov = proposal.cov
        cur_grad = _log_target_grad(beta, model, labels, mean, var)
    for _ in range(config.beta_substeps):
        h = proposal.scale
        eps = rng.standard_normal(model.p)
        log_u = math.log(rng.random())
        if langevin:
            fwd_mean = beta + 0.5 * h * h * cov @ cur_grad
            cand = fwd_mean + h * proposal.chol @ eps
        else:
            cand = beta + h * proposal.chol @ eps
        new, new_pl = _log_beta_target(cand, model, labels, mean, var)
        log_ratio = new - cur
        if langevin and np.isfinite(new):
            new_grad = _log_target_grad(cand, model, labels, mean, var)
            back_mean = cand + 0.5 * h * h * cov @ new_grad
            log_ratio += _log_mvn_chol(beta, back_mean, h * proposal.chol) - _log_mvn_chol(cand, fwd_mean, h * proposal.chol)
        proposal.n_prop += 1
        if np.isfinite(log_ratio) and log_u < log_ratio:
            beta, cur, cur_pl = cand, new, new_pl
            if langevin:
                cur_grad = new_grad
            proposal.n_acc += 1
    return beta, cur_pl


def _log_target_grad(beta, model: Model, labels, mean, var) -> np.ndarray:
    _, g, _ = partial_log_lik_derivatives(beta, model.x, model.ds.time, model.ds.event, labels)
    return g - (beta - mean) / var


def _log_mvn_chol(x, mean, chol) -> float:
    r = linalg.solve_triangular(chol, x - mean, lower=True)
    return float(-0.5 * r @ r - np.sum(np.log(np.abs(np.diag(chol)))))


def _refresh_preconditioner(state: ChainState, model: Model, proposal: BetaProposal) -> None:
    mean, var = _beta_prior(model, state.horseshoe)
    _, _, h = partial_log_lik_derivatives(state.beta, model.x, model.ds.time, model.ds.event, state.clusters.labels)
    info = -h + np.diag(1.0 / var)
    try:
        cov = linalg.inv(info)
        proposal.chol = np.linalg.cholesky(0.5 * (cov + cov.T))
    except (linalg.LinAlgError, np.linalg.LinAlgError):
        pass


def _exposure_resid(model: Model, state: ChainState) -> np.ndarray:
    """A minus the full exposure-model mean for each subject."""
    ds, cl = model.ds, state.clusters
    mu = cl.alpha0[cl.labels] + np.einsum("ij,ij->i", ds.v, cl.alpha_v[cl.labels])
    if ds.dim_z:
        mu = mu + ds.z @ state.alpha_z
    return ds.exposure - mu


def gibbs_sweep(
    state: ChainState,
    model: Model,
    config: McmcConfig,
    proposal: BetaProposal,
    rng: np.random.Generator,
    trace: list[str] | None = None,
) -> ChainState:
    """One full sweep; ``trace`` (if given) records the blocks in call order."""
    ds, prior = model.ds, model.prior
    hs = state.horseshoe
    cl = state.clusters.copy()
    labels = cl.labels

    def mark(name: str) -> None:
        if trace is not None:
            trace.append(name)

    if prior.horseshoe_alpha_z and hs is not None and ds.dim_z:
        hs.psi1, hs.nu1 = sample_horseshoe_locals(state.alpha_z, hs.psi1, hs.nu1, prior.tau1, rng)
        mark("horseshoe_alpha_z")
    # alpha_z
    z_resid = ds.exposure - cl.alpha0[labels] - np.einsum("ij,ij->i", ds.v, cl.alpha_v[labels])
    m_z, v_z = _alpha_z_prior(model, hs)
    alpha_z = sample_global_alpha_z(ds.z, z_resid, cl.sigma2[labels], m_z, v_z, rng)
    mark("alpha_z")
    # cluster locations
    loc_resid = ds.exposure - (ds.z @ alpha_z if ds.dim_z else 0.0)
    cl.alpha0, cl.alpha_v = sample_cluster_locations(ds.v, loc_resid, labels, cl.n_clusters, cl.sigma2, prior, rng)
    mark("locations")
    # variances
    full_resid = loc_resid - cl.alpha0[labels] - np.einsum("ij,ij->i", ds.v, cl.alpha_v[labels])
    sq = full_resid * full_resid
    if config.homogeneous_sigma:
        common = sample_common_variance(sq, prior, rng)
        cl.sigma2 = np.full(cl.n_clusters, common)
    else:
        common = None
        cl.sigma2 = sample_cluster_variances(sq, labels, cl.n_clusters, prior, rng)
    mark("variances")
    # assignments
    fresh = draw_fresh(ds.n, ds.dim_v, prior, rng, common_sigma2=common)
    eta = model.x @ state.beta
    cl = sweep_assignments(
        cl, ds, eta, alpha_z, state.conc.gamma, fresh, model.ctx,
        exact=config.exact_assignment, reuse_singleton=config.reuse_singleton,
        per_sweep=config.new_cluster_draws == "per-sweep",
        use_outcome=config.outcome_in_assignment,
    )
    cl.check()
    mark("assignments")
    conc = sample_concentration(state.conc, cl.n_clusters, ds.n, rng, paper_literal=config.paper_literal_gamma)
    mark("gamma")
    new = ChainState(state.beta, alpha_z, cl, conc, hs)
    if prior.horseshoe_beta and hs is not None:
        hs.psi2, hs.nu2 = sample_horseshoe_locals(state.beta, hs.psi2, hs.nu2, prior.tau2, rng)
        mark("horseshoe_beta")
    new.beta, new.logpl = sample_beta(new, model, proposal, config, rng)
    mark("beta")
    return new


def log_general_posterior(state: ChainState, model: Model, config: McmcConfig, logpl: float | None = None) -> float:
    """Log of the joint general posterior (up to a constant) at ``state``.

    ``logpl`` may supply the clustered partial likelihood if it is already
    known; otherwise it is recomputed.
    """
    ds, prior, cl = model.ds, model.prior, state.clusters
    hs = state.horseshoe
    if logpl is None:
        logpl = partial_log_lik(state.beta, model.x, ds.time, ds.event, cl.labels)
    total = float(logpl)
    mb, vb = _beta_prior(model, hs)
    total += _log_normal(state.beta, mb, vb)
    if ds.dim_z:
        mz, vz = _alpha_z_prior(model, hs)
        total += _log_normal(state.alpha_z, mz, vz)
    if hs is not None:
        # half-Cauchy densities of the active local scales
        if prior.horseshoe_beta:
            total += float(np.sum(np.log(2.0 / np.pi) - np.log1p(hs.psi2**2)))
        if prior.horseshoe_alpha_z and ds.dim_z:
            total += float(np.sum(np.log(2.0 / np.pi) - np.log1p(hs.psi1**2)))
    m0, s0 = prior.location_prior(ds.dim_v)
    loc = np.column_stack([cl.alpha0, cl.alpha_v])
    total += _log_normal(loc, m0[None, :], s0[None, :])
    s2 = cl.sigma2[:1] if config.homogeneous_sigma else cl.sigma2
    total += float(np.sum(stats.invgamma.logpdf(s2, prior.a_sigma, scale=prior.b_sigma)))
    total += _log_normal(_exposure_resid(model, state), 0.0, cl.sigma2[cl.labels])
    total += log_crp_partition_prob(cl.labels, state.conc.gamma)
    a, b, g = state.conc.a_gamma, state.conc.b_gamma, state.conc.gamma
    total += a * math.log(b) - float(gammaln(a)) + (a - 1.0) * math.log(g) - b * g
    return total


@dataclass
class PosteriorDraws:
    iters: np.ndarray
    beta: np.ndarray  # (R, p)
    alpha_z: np.ndarray  # (R, dim_z)
    gamma: np.ndarray
    n_clusters: np.ndarray
    sigma2_mean: np.ndarray
    logpost: np.ndarray
    beta_names: list[str]
    final_labels: np.ndarray
    acceptance_rate: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.iters.shape[0])

    @property
    def beta_a(self) -> np.ndarray:
        return self.beta[:, 0]

    def header(self) -> list[str]:
        bx = [f"beta_x_{j}" for j in range(1, self.beta.shape[1])]
        az = [f"alpha_z_{j}" for j in range(1, self.alpha_z.shape[1] + 1)]
        return ["iter", "beta_a", *bx, *az, "gamma", "K_n", "logpost"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in range(len(self)):
            w.writerow(
                [int(self.iters[r]), *map(repr, map(float, self.beta[r])), *map(repr, map(float, self.alpha_z[r])),
                 repr(float(self.gamma[r])), int(self.n_clusters[r]), repr(float(self.logpost[r]))]
            )
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def initial_state(model: Model, config: McmcConfig) -> ChainState:
    """beta = 0, one cluster, exposure coefficients and variance from OLS."""
    ds = model.ds
    x = np.column_stack([np.ones(ds.n), ds.z, ds.v])
    coef, *_ = np.linalg.lstsq(x, ds.exposure, rcond=None)
    resid = ds.exposure - x @ coef
    s2 = max(float(resid @ resid) / max(ds.n - x.shape[1], 1), 1e-6)
    alpha_z = coef[1 : 1 + ds.dim_z].copy()
    alpha_v = coef[1 + ds.dim_z :].copy()
    cl = ClusterState.single(ds.n, coef[0], alpha_v, s2)
    prior = model.prior
    conc = ConcentrationState(config.gamma_init, 0.5, prior.a_gamma, prior.b_gamma)
    hs = None
    if prior.horseshoe_alpha_z or prior.horseshoe_beta:
        hs = HorseshoeState.ones(ds.dim_z, model.p)
    st = ChainState(np.zeros(model.p), alpha_z, cl, conc, hs)
    st.logpl = partial_log_lik(st.beta, model.x, ds.time, ds.event, cl.labels)
    return st


def run_chain(
    ds: Dataset,
    config: McmcConfig = McmcConfig(),
    prior: PriorConfig = PriorConfig(),
    rng: np.random.Generator | None = None,
    sel: DesignSelector = FULL_DESIGN,
) -> PosteriorDraws:
    """Run ``total_iters`` sweeps; keep every ``thin``-th draw after burn-in."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    model = Model.build(ds, prior, sel)
    state = initial_state(model, config)
    proposal = BetaProposal.identity(model.p, config.beta_step * 2.38 / math.sqrt(model.p))
    _refresh_preconditioner(state, model, proposal)
    r = config.n_retained
    out_beta = np.empty((r, model.p))
    out_az = np.empty((r, ds.dim_z))
    out_g = np.empty(r)
    out_k = np.empty(r, dtype=np.int64)
    out_s2 = np.empty(r)
    out_lp = np.empty(r)
    out_it = np.empty(r, dtype=np.int64)
    row = 0
    window_prop = window_acc = 0
    for it in range(config.total_iters):
        if it == config.burn_in:
            proposal.adapting = False
            proposal.n_prop = proposal.n_acc = 0
        n_prop0, n_acc0 = proposal.n_prop, proposal.n_acc
        state = gibbs_sweep(state, model, config, proposal, rng)
        if proposal.adapting:
            window_prop += proposal.n_prop - n_prop0
            window_acc += proposal.n_acc - n_acc0
            if (it + 1) % config.adapt_every == 0:
                rate = window_acc / max(window_prop, 1)
                proposal.scale *= math.exp(rate - config.target_accept)
                _refresh_preconditioner(state, model, proposal)
                window_prop = window_acc = 0
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            out_it[row] = it + 1
            out_beta[row] = state.beta
            out_az[row] = state.alpha_z
            out_g[row] = state.conc.gamma
            out_k[row] = state.clusters.n_clusters
            out_s2[row] = float(np.mean(state.clusters.sigma2))
            out_lp[row] = log_general_posterior(state, model, config, logpl=state.logpl)
            row += 1
    meta = {"config": asdict(config), "prior": asdict(prior), "dataset": ds.digest()}
    return PosteriorDraws(
        out_it, out_beta, out_az, out_g, out_k, out_s2, out_lp, model.names,
        state.clusters.labels.copy(), proposal.acceptance_rate, meta,
    )


@dataclass(frozen=True)
class PosteriorSummary:
    names: list[str]
    mean: np.ndarray
    sd: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    level: float

    def row(self, name: str) -> dict:
        j = self.names.index(name)
        return {"param": name, "mean": float(self.mean[j]), "sd": float(self.sd[j]),
                "lo": float(self.lo[j]), "hi": float(self.hi[j])}

    def rows(self) -> list[dict]:
        return [self.row(nm) for nm in self.names]


def posterior_summary(draws: PosteriorDraws | np.ndarray, level: float = 0.95, names: list[str] | None = None) -> PosteriorSummary:
    """Posterior means, SDs and equal-tailed credible intervals.

    Accepts a :class:`PosteriorDraws` (summarising beta, alpha_z and gamma) or a
    plain (R,) / (R, d) array.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if isinstance(draws, PosteriorDraws):
        mat = np.column_stack([draws.beta, draws.alpha_z, draws.gamma])
        names = list(draws.beta_names) + [f"alpha_z_{j + 1}" for j in range(draws.alpha_z.shape[1])] + ["gamma"]
    else:
        mat = np.asarray(draws, dtype=float)
        mat = mat[:, None] if mat.ndim == 1 else mat
        names = names or [f"x{j + 1}" for j in range(mat.shape[1])]
    if mat.shape[0] == 0:
        raise ValueError("no draws to summarise")
    tail = (1.0 - level) / 2.0
    sd = mat.std(axis=0, ddof=1) if mat.shape[0] > 1 else np.zeros(mat.shape[1])
    lo, hi = np.quantile(mat, [tail, 1.0 - tail], axis=0)
    return PosteriorSummary(names, mat.mean(axis=0), sd, lo, hi, level)


def draws_meta_json(draws: PosteriorDraws) -> str:
    return json.dumps(draws.meta, indent=2, sort_keys=True, default=str)
