"""Gaussian exposure model: conjugate draws for cluster locations, variances and alpha_z.

Exposure given cluster k is ``A_i ~ N(alpha0_k + v_i' alpha_vk + z_i' alpha_z, sigma2_k)``.
The horseshoe local scales use the inverse-gamma auxiliary representation of
the half-Cauchy (Makalic & Schmidt, 2016).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ClusterRegressionParams:
    alpha0: float
    alpha_v: np.ndarray
    sigma2: float

    def __post_init__(self) -> None:
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")


@dataclass(frozen=True)
class GlobalRegressionParams:
    alpha_z: np.ndarray


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters; vector blocks use independent N(m, s2) coordinates."""

    m_beta_a: float = 0.0
    tau2_beta_a: float = 100.0
    m_beta_x: float = 0.0
    s2_beta_x: float = 100.0
    m_alpha_z: float = 0.0
    s2_alpha_z: float = 100.0
    m_alpha_v: float = 0.0
    s2_alpha_v: float = 100.0
    m_alpha0: float = 0.0
    tau2_alpha0: float = 100.0
    a_sigma: float = 2.0
    b_sigma: float = 2.0
    a_gamma: float = 2.0
    b_gamma: float = 4.0
    horseshoe_alpha_z: bool = False
    horseshoe_beta: bool = False
    tau1: float = 1.0
    tau2: float = 1.0

    def __post_init__(self) -> None:
        for name in ("tau2_beta_a", "s2_beta_x", "s2_alpha_z", "s2_alpha_v", "tau2_alpha0",
                     "a_sigma", "b_sigma", "a_gamma", "b_gamma", "tau1", "tau2"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"prior field {name} must be positive, got {val}")

    def beta_prior(self, p: int) -> tuple[np.ndarray, np.ndarray]:
        mean = np.r_[self.m_beta_a, np.full(p - 1, self.m_beta_x)]
        var = np.r_[self.tau2_beta_a, np.full(p - 1, self.s2_beta_x)]
        return mean, var

    def location_prior(self, dim_v: int) -> tuple[np.ndarray, np.ndarray]:
        mean = np.r_[self.m_alpha0, np.full(dim_v, self.m_alpha_v)]
        var = np.r_[self.tau2_alpha0, np.full(dim_v, self.s2_alpha_v)]
        return mean, var


@dataclass
class HorseshoeState:
    """Local scales psi and their inverse-gamma auxiliaries nu, for alpha_z (1) and beta (2)."""

    psi1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nu1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    psi2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nu2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def ones(cls, dim_alpha_z: int, dim_beta: int) -> "HorseshoeState":
        return cls(np.ones(dim_alpha_z), np.ones(dim_alpha_z), np.ones(dim_beta), np.ones(dim_beta))


def inv_gamma(shape, rate, rng: np.random.Generator, size=None) -> np.ndarray:
    """Inverse-gamma draws parameterised by shape and rate (scale of the gamma = 1/rate)."""
    return 1.0 / rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)


def exposure_log_density(a, mean, sigma2) -> np.ndarray | float:
    """log N(a; mean, sigma2), elementwise."""
    r = np.asarray(a, dtype=float) - mean
    out = -0.5 * (LOG_2PI + np.log(sigma2) + r * r / sigma2)
    return float(out) if np.ndim(out) == 0 else out


def exposure_mean(alpha0, alpha_v, alpha_z, v_i, z_i) -> float:
    return float(alpha0 + np.dot(v_i, alpha_v) + np.dot(z_i, alpha_z))


def _mvn_from_precision(prec: np.ndarray, rhs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(prec^-1 rhs, prec^-1) for a stack of (d, d) precision matrices."""
    chol = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    eps = rng.standard_normal(rhs.shape)
    return mean + np.linalg.solve(np.swapaxes(chol, -1, -2), eps[..., None])[..., 0]


def sample_cluster_locations(
    v: np.ndarray,
    resid: np.ndarray,
    labels: np.ndarray,
    n_clusters: int,
    sigma2: np.ndarray,
    prior: PriorConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Joint draw of (alpha0_k, alpha_vk) for every cluster.

    ``resid`` is ``A - z alpha_z``; ``sigma2`` holds one variance per cluster.
    Clusters with no members get a prior draw.
    """
    n, q = v.shape
    d = q + 1
    design = np.column_stack([np.ones(n), v])
    onehot = (labels[None, :] == np.arange(n_clusters)[:, None]).astype(float)
    xtx = (onehot @ (design[:, :, None] * design[:, None, :]).reshape(n, d * d)).reshape(n_clusters, d, d)
    xty = onehot @ (design * resid[:, None])
    m0, s0 = prior.location_prior(q)
    inv_s2 = 1.0 / np.asarray(sigma2, dtype=float).reshape(n_clusters)
    prec = xtx * inv_s2[:, None, None] + np.diag(1.0 / s0)[None]
    rhs = xty * inv_s2[:, None] + (m0 / s0)[None]
    draw = _mvn_from_precision(prec, rhs, rng)
    return draw[:, 0].copy(), draw[:, 1:].copy()


def sample_cluster_location(
    v_k: np.ndarray,
    resid_k: np.ndarray,
    sigma2_k: float,
    prior: PriorConfig,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray]:
    """Single-cluster version of :func:`sample_cluster_locations` (may be empty)."""
    v_k = np.asarray(v_k, dtype=float).reshape(len(resid_k), -1) if len(resid_k) else np.asarray(v_k, dtype=float).reshape(0, -1)
    labels = np.zeros(v_k.shape[0], dtype=np.int64)
    a0, av = sample_cluster_locations(v_k, np.asarray(resid_k, dtype=float), labels, 1, np.array([sigma2_k]), prior, rng)
    return float(a0[0]), av[0]


def sample_cluster_variances(
    sq_resid: np.ndarray,
    labels: np.ndarray,
    n_clusters: int,
    prior: PriorConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """sigma2_k ~ IG(a + n_k/2, b + SS_k/2) for every cluster."""
    counts = np.bincount(labels, minlength=n_clusters)[:n_clusters]
    ss = np.bincount(labels, weights=sq_resid, minlength=n_clusters)[:n_clusters]
    return inv_gamma(prior.a_sigma + 0.5 * counts, prior.b_sigma + 0.5 * ss, rng)


def sample_cluster_variance(resid_k: np.ndarray, prior: PriorConfig, rng: np.random.Generator) -> float:
    r = np.asarray(resid_k, dtype=float)
    return float(inv_gamma(prior.a_sigma + 0.5 * r.size, prior.b_sigma + 0.5 * float(r @ r), rng))


def sample_common_variance(sq_resid: np.ndarray, prior: PriorConfig, rng: np.random.Generator) -> float:
    """Shared sigma2 pooling every cluster's residuals."""
    return float(inv_gamma(prior.a_sigma + 0.5 * sq_resid.size, prior.b_sigma + 0.5 * float(np.sum(sq_resid)), rng))


def alpha_z_posterior(
    z: np.ndarray,
    resid: np.ndarray,
    sigma2_i: np.ndarray,
    prior_mean: np.ndarray,
    prior_var: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Precision matrix and right-hand side of the alpha_z full conditional.

    ``resid`` is ``A - alpha0_{s_i} - v_i' alpha_v{s_i}`` and each row carries
    weight ``1 / sigma2_{s_i}``.
    """
    w = 1.0 / np.asarray(sigma2_i, dtype=float)
    prec = (z * w[:, None]).T @ z + np.diag(1.0 / prior_var)
    rhs = z.T @ (w * resid) + prior_mean / prior_var
    return prec, rhs


def sample_global_alpha_z(
    z: np.ndarray,
    resid: np.ndarray,
    sigma2_i: np.ndarray,
    prior_mean: np.ndarray,
    prior_var: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    if z.shape[1] == 0:
        return np.zeros(0)
    prec, rhs = alpha_z_posterior(z, resid, sigma2_i, prior_mean, prior_var)
    return _mvn_from_precision(prec, rhs, rng)


def sample_horseshoe_locals(
    coeffs: np.ndarray,
    psi: np.ndarray,
    nu: np.ndarray,
    global_tau: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Update horseshoe local scales given coefficients ~ N(0, psi^2 tau^2).

    psi^2 | nu, c ~ IG(1, 1/nu + c^2 / (2 tau^2)), then nu | psi^2 ~ IG(1, 1 + 1/psi^2).
    Returns the new ``(psi, nu)``.
    """
    c = np.asarray(coeffs, dtype=float)
    if c.size == 0:
        return np.zeros(0), np.zeros(0)
    psi2 = inv_gamma(1.0, 1.0 / nu + c * c / (2.0 * global_tau**2), rng)
    nu_new = inv_gamma(1.0, 1.0 + 1.0 / psi2, rng)
    return np.sqrt(psi2), nu_new
