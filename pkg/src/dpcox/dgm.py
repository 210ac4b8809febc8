"""Simulation design: clustered unmeasured confounder U driving exposure and event times.

Two settings ("easy" / "hard" to identify) by four scenarios (a-d) that
cross instrument strength with confounder strength. Event times for U != 0
follow an early "latent" exponential phase; subjects who survive it past a
U-specific threshold fall back to a constant hazard.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import Literal

import numpy as np

from .data import Dataset

Setting = Literal["easy", "hard"]
ScenarioId = Literal["a", "b", "c", "d"]

U_PROBS = (1 / 2, 1 / 3, 1 / 6)

_ALPHA0 = {"easy": (16.0, 8.0, 2.0), "hard": (12.0, 8.0, 3.0)}
_ALPHA_UZ2 = {"easy": (4.0, 2.0, 1.0), "hard": (4.5, 2.0, 1.5)}
# constant hazards: U=0 always, U=1/2 once past the latent phase
_BASELINE = {"easy": (0.15, 0.15, 0.1), "hard": (0.035, 0.1, 0.1)}
_LATENT_RATE = {"easy": 0.005, "hard": 0.015}
_ALT_LATENT_RATE = {"easy": 0.005, "hard": 0.005}


@dataclass(frozen=True)
class Scenario:
    setting: Setting
    id: ScenarioId
    n: int
    alpha0_by_u: tuple[float, float, float]
    alpha_z1: float
    alpha_uz2_by_u: tuple[float, float, float]
    exposure_sd: float = 0.5
    beta_a_true: float = -0.1
    beta_z2_true: float = 0.1
    baseline_by_u: tuple[float, float, float] = (0.15, 0.15, 0.1)
    # latent-phase rates for U=1 and U=2
    latent_rate_by_u: tuple[float, float] = (0.005, 0.005)
    thresholds: tuple[float, float] = (65.0, 40.0)
    censor_target: tuple[float, float] = (0.10, 0.15)
    # alternative readings of the design, all off by default
    exposure_uses_z1_twice: bool = False
    else_mode: Literal["fresh", "piecewise"] = "piecewise"

    @property
    def label(self) -> str:
        return f"{self.setting}-{self.id}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def make_scenario(
    setting: str,
    id: str,
    n: int,
    *,
    hard_u2_latent: Literal["late1", "late2"] = "late1",
    **overrides,
) -> Scenario:
    """Fill scenario parameters from the settings table.

    ``hard_u2_latent`` chooses which latent-phase rate U=2 uses in the hard
    setting: ``"late1"`` (0.005, as written) or ``"late2"`` (0.015, as U=1).
    """
    if setting not in _ALPHA0:
        raise ValueError(f"unknown setting {setting!r}; expected 'easy' or 'hard'")
    if id not in ("a", "b", "c", "d"):
        raise ValueError(f"unknown scenario {id!r}; expected one of a, b, c, d")
    if n < 2:
        raise ValueError("n must be at least 2")
    alpha_z1 = 1.5 if id in ("a", "c") else 0.5
    uz2 = _ALPHA_UZ2[setting]
    if id in ("c", "d"):
        uz2 = tuple(0.5 * x for x in uz2)
    lat1 = _LATENT_RATE[setting]
    lat2 = _ALT_LATENT_RATE[setting] if hard_u2_latent == "late1" else _LATENT_RATE[setting]
    scn = Scenario(
        setting=setting,  # type: ignore[arg-type]
        id=id,  # type: ignore[arg-type]
        n=int(n),
        alpha0_by_u=_ALPHA0[setting],
        alpha_z1=alpha_z1,
        alpha_uz2_by_u=uz2,  # type: ignore[arg-type]
        baseline_by_u=_BASELINE[setting],
        latent_rate_by_u=(lat1, lat2),
    )
    return replace(scn, **overrides) if overrides else scn


def draw_covariates(scn: Scenario, rng: np.random.Generator, n: int | None = None):
    """U ~ Multinomial(1/2, 1/3, 1/6); z1 ~ Gamma(shape 2, rate 2); z2 ~ Bernoulli(1/2)."""
    n = scn.n if n is None else n
    u = rng.choice(3, size=n, p=U_PROBS)
    z1 = rng.gamma(2.0, 1.0 / 2.0, size=n)
    z2 = rng.binomial(1, 0.5, size=n).astype(float)
    return u, z1, z2


def exposure_mean(scn: Scenario, u, z1, z2) -> np.ndarray:
    a0 = np.asarray(scn.alpha0_by_u)[u]
    auz = np.asarray(scn.alpha_uz2_by_u)[u]
    second = z1 if scn.exposure_uses_z1_twice else z2
    return a0 + z1 * scn.alpha_z1 + second * auz


def draw_exposure(scn: Scenario, u, z1, z2, rng: np.random.Generator) -> np.ndarray:
    mu = exposure_mean(scn, u, z1, z2)
    return mu + scn.exposure_sd * rng.standard_normal(mu.shape[0])


def draw_event_time(scn: Scenario, a, z2, u, rng: np.random.Generator) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    u = np.asarray(u)
    risk = np.exp(scn.beta_a_true * a + scn.beta_z2_true * np.asarray(z2, dtype=float))
    n = a.shape[0]
    # fixed draw order keeps datasets reproducible across modes
    e_latent = rng.standard_exponential(n)
    e_base = rng.standard_exponential(n)
    base_rate = np.asarray(scn.baseline_by_u)[u] * risk
    t = e_base / base_rate
    lat_rates = np.r_[0.0, scn.latent_rate_by_u][u] * risk
    thr = np.r_[np.inf, scn.thresholds][u]
    has_latent = u != 0
    t_lat = np.full(n, np.inf)
    t_lat[has_latent] = e_latent[has_latent] / lat_rates[has_latent]
    early = has_latent & (t_lat < thr)
    t[early] = t_lat[early]
    if scn.else_mode == "piecewise":
        late = has_latent & ~early
        t[late] = thr[late] + e_base[late] / base_rate[late]
    return t


def _censor_fraction(rate: float, t: np.ndarray) -> float:
    # P(C < T) for C ~ Exp(rate), averaged over the pilot event times
    return float(np.mean(-np.expm1(-rate * t)))


@functools.lru_cache(maxsize=64)
def calibrate_censoring(scn: Scenario, pilot_size: int = 10_000, pilot_seed: int = 0) -> float:
    """Exponential censoring rate giving P(C < T) at the middle of the target band.

    The pilot sample is drawn from a seed fixed per scenario so the rate (and
    hence every dataset) does not depend on the caller's RNG.
    """
    rng = np.random.default_rng([pilot_seed, hash_scenario(scn)])
    u, z1, z2 = draw_covariates(scn, rng, pilot_size)
    a = draw_exposure(scn, u, z1, z2, rng)
    t = draw_event_time(scn, a, z2, u, rng)
    target = 0.5 * (scn.censor_target[0] + scn.censor_target[1])
    lo, hi = 0.0, 1.0 / float(np.mean(t))
    expand = 0
    while _censor_fraction(hi, t) < target:
        hi *= 2.0
        expand += 1
        if expand > 20:
            raise RuntimeError("censoring calibration failed: upper bound not found")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _censor_fraction(mid, t) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * hi:
            break
    return 0.5 * (lo + hi)


def hash_scenario(scn: Scenario) -> int:
    return int.from_bytes(hashlib.sha256(scn.to_json().encode()).digest()[:8], "little")


def generate_dataset(scn: Scenario, seed: int | np.random.SeedSequence) -> Dataset:
    """One simulated dataset; z = (z1,), v = (z2,), true_cluster = U."""
    rate = calibrate_censoring(scn)
    rng = np.random.default_rng(seed)
    u, z1, z2 = draw_covariates(scn, rng)
    a = draw_exposure(scn, u, z1, z2, rng)
    t_event = draw_event_time(scn, a, z2, u, rng)
    c = rng.standard_exponential(scn.n) / rate
    time = np.minimum(t_event, c)
    event = (t_event <= c).astype(np.int64)
    return Dataset(
        ids=np.arange(1, scn.n + 1),
        time=time,
        event=event,
        exposure=a,
        z=z1[:, None],
        v=z2[:, None],
        true_cluster=u.astype(np.int64),
    )
