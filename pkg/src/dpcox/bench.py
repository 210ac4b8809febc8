"""Replication runner and performance metrics for the simulation study.

Every (setting, scenario, rep) triple gets its own seed derived from the
master seed, so all methods in a replication see the same dataset and the
output does not depend on worker scheduling.
"""

from __future__ import annotations

import csv
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .baselines import fit_2sls, fit_2sri, fit_infeasible, fit_naive
from .data import Dataset
from .dgm import make_scenario, generate_dataset
from .regression import PriorConfig
from .sampler import McmcConfig, posterior_summary, run_chain

METHODS = ("proposed", "naive", "2sls", "2sri", "infeasible")


@dataclass(frozen=True)
class MetricsSummary:
    method: str
    bias: float
    ese: float
    rmse: float
    cp: float
    n_reps: int
    mean_by_param: dict = field(default_factory=dict)


def estimator_metrics(
    estimates: Sequence[float],
    intervals: Sequence[Sequence[float]],
    truth: float,
    method: str = "",
) -> MetricsSummary:
    """Bias, ESE (divisor R-1), RMSE (divisor R) and interval coverage."""
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("no estimates")
    if est.size < 2:
        raise ValueError("need at least two replications")
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    if iv.shape[0] != est.size:
        raise ValueError("intervals not aligned with estimates")
    err = est - truth
    bias = float(err.mean())
    ese = float(est.std(ddof=1))
    rmse = float(math.sqrt(np.mean(err * err)))
    cp = float(np.mean((iv[:, 0] <= truth) & (truth <= iv[:, 1])))
    return MetricsSummary(method, bias, ese, rmse, cp, int(est.size))


def _autocorr(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def effective_sample_size(chain: Sequence[float]) -> float:
    """ESS with Geyer's initial positive sequence estimator."""
    x = np.asarray(chain, dtype=float)
    n = x.size
    if n < 10:
        raise ValueError("chain must have at least 10 draws")
    if np.ptp(x) == 0:
        return float(n)
    rho = _autocorr(x)
    tau = -1.0
    for k in range(0, n // 2):
        pair = rho[2 * k] + rho[2 * k + 1] if 2 * k + 1 < n else rho[2 * k]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))


@dataclass(frozen=True)
class ContingencyTable:
    rows: np.ndarray  # estimated cluster ids
    cols: np.ndarray  # true levels
    counts: np.ndarray
    purity: float

    def to_rows(self) -> list[dict]:
        return [
            {"cluster": int(r), "true_u": int(c), "count": int(self.counts[a, b])}
            for a, r in enumerate(self.rows)
            for b, c in enumerate(self.cols)
        ]


def cluster_contingency(assignments: Sequence[int], true_u: Sequence[int]) -> ContingencyTable:
    """Cross-tabulate estimated clusters against true levels; purity is the size-weighted max share."""
    s = np.asarray(assignments)
    u = np.asarray(true_u)
    if s.shape != u.shape:
        raise ValueError("assignments and true labels differ in length")
    if s.size == 0:
        raise ValueError("empty assignment vector")
    rows, ri = np.unique(s, return_inverse=True)
    cols, ci = np.unique(u, return_inverse=True)
    counts = np.zeros((rows.size, cols.size), dtype=np.int64)
    np.add.at(counts, (ri, ci), 1)
    purity = float(counts.max(axis=1).sum() / s.size)
    return ContingencyTable(rows, cols, counts, purity)


# --------------------------------------------------------------------------
# replication runner


@dataclass(frozen=True)
class BenchmarkConfig:
    settings: tuple[str, ...] = ("easy",)
    scenarios: tuple[str, ...] = ("a",)
    methods: tuple[str, ...] = METHODS
    reps: int = 50
    n: int = 600
    master_seed: int = 2024
    jobs: int = 1
    level: float = 0.95
    mcmc: McmcConfig = field(default_factory=lambda: McmcConfig(homogeneous_sigma=True))
    prior: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self) -> None:
        if self.reps < 2:
            raise ValueError("reps must be at least 2")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")


def replicate_seed(master: int, setting: str, scenario: str, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), zlib.crc32(setting.encode()), zlib.crc32(scenario.encode()), int(rep)])


def _fit_baseline(fn: Callable, ds: Dataset, level: float) -> dict:
    fr = fn(ds, level=level)
    return {
        "estimate": float(fr.estimate[0]),
        "se": float(fr.se[0]),
        "lo": float(fr.ci[0, 0]),
        "hi": float(fr.ci[0, 1]),
        "converged": int(fr.converged),
    }


def _fit_proposed(ds: Dataset, cfg: BenchmarkConfig, seed: np.random.SeedSequence) -> dict:
    draws = run_chain(ds, cfg.mcmc, cfg.prior, rng=np.random.default_rng(seed))
    summ = posterior_summary(draws, cfg.level)
    out = {
        "estimate": float(summ.mean[0]),
        "se": float(summ.sd[0]),
        "lo": float(summ.lo[0]),
        "hi": float(summ.hi[0]),
        "converged": 1,
        "k_n": float(np.mean(draws.n_clusters)),
        "ess": effective_sample_size(draws.beta_a) if len(draws) >= 10 else float("nan"),
        "accept": draws.acceptance_rate,
        "gamma": float(np.mean(draws.gamma)),
        "sigma2": float(np.mean(draws.sigma2_mean)),
    }
    for j in range(1, draws.beta.shape[1]):
        out[f"beta_x_{j}"] = float(np.mean(draws.beta[:, j]))
    for j in range(draws.alpha_z.shape[1]):
        out[f"alpha_z_{j + 1}"] = float(np.mean(draws.alpha_z[:, j]))
    if ds.true_cluster is not None:
        tab = cluster_contingency(draws.final_labels, ds.true_cluster)
        out["purity"] = tab.purity
        out["_contingency"] = tab.to_rows()
    return out


_BASELINES = {"naive": fit_naive, "infeasible": fit_infeasible, "2sls": fit_2sls, "2sri": fit_2sri}


def run_replicate(cfg: BenchmarkConfig, setting: str, scenario: str, rep: int) -> list[dict]:
    """All requested methods on one simulated dataset; failures become error rows."""
    data_seed, chain_seed = replicate_seed(cfg.master_seed, setting, scenario, rep).spawn(2)
    scn = make_scenario(setting, scenario, cfg.n)
    ds = generate_dataset(scn, data_seed)
    rows = []
    for method in cfg.methods:
        row = {"setting": setting, "scenario": scenario, "rep": rep, "method": method, "truth": scn.beta_a_true}
        try:
            if method == "proposed":
                row.update(_fit_proposed(ds, cfg, chain_seed))
            else:
                row.update(_fit_baseline(_BASELINES[method], ds, cfg.level))
            row["error"] = ""
        except Exception as exc:  # recorded per row, never aborts the run
            row.update(estimate=float("nan"), se=float("nan"), lo=float("nan"), hi=float("nan"), converged=0)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def _run_task(args) -> list[dict]:
    return run_replicate(*args)


@dataclass
class BenchmarkReport:
    replicates: list[dict]
    metrics: list[dict]
    boxplot: list[dict]
    contingency: list[dict]

    def write(self, outdir: str | Path) -> dict[str, Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, rows, cols in (
            ("metrics", self.metrics, METRIC_COLUMNS),
            ("boxplot", self.boxplot, ["setting", "scenario", "method", "rep", "hr"]),
            ("contingency", self.contingency, ["setting", "scenario", "rep", "cluster", "true_u", "count"]),
            ("replicates", self.replicates, replicate_columns(self.replicates)),
        ):
            paths[name] = out / f"{name}.csv"
            write_rows(paths[name], rows, cols)
        return paths


METRIC_COLUMNS = ["setting", "scenario", "method", "n_reps", "n_failed", "bias", "ese", "rmse", "cp", "aux"]
_REPLICATE_BASE = ["setting", "scenario", "rep", "method", "truth", "estimate", "se", "lo", "hi", "converged", "error"]


def replicate_columns(rows: Iterable[dict]) -> list[str]:
    extra: list[str] = []
    for r in rows:
        for k in r:
            if k not in _REPLICATE_BASE and not k.startswith("_") and k not in extra:
                extra.append(k)
    return _REPLICATE_BASE + extra


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def read_rows(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


_AUX_KEYS = ("beta_x_", "alpha_z_", "sigma2", "gamma", "k_n", "purity", "ess")


def _as_float(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return float("nan")


def aggregate(replicates: list[dict]) -> list[dict]:
    """Per (setting, scenario, method) metrics from replicate rows (dicts or CSV rows)."""
    groups: dict[tuple, list[dict]] = {}
    for r in replicates:
        groups.setdefault((r["setting"], r["scenario"], r["method"]), []).append(r)
    out = []
    for (setting, scenario, method), rows in groups.items():
        ok = [r for r in rows if not r.get("error") and np.isfinite(_as_float(r["estimate"]))]
        rec = {"setting": setting, "scenario": scenario, "method": method,
               "n_reps": len(ok), "n_failed": len(rows) - len(ok)}
        if len(ok) >= 2:
            m = estimator_metrics(
                [_as_float(r["estimate"]) for r in ok],
                [(_as_float(r["lo"]), _as_float(r["hi"])) for r in ok],
                _as_float(ok[0]["truth"]),
                method,
            )
            rec.update(bias=m.bias, ese=m.ese, rmse=m.rmse, cp=m.cp)
        else:
            rec.update(bias=float("nan"), ese=float("nan"), rmse=float("nan"), cp=float("nan"))
        aux = {}
        for key in sorted({k for r in ok for k in r if k.startswith(_AUX_KEYS)}):
            vals = [_as_float(r.get(key)) for r in ok]
            vals = [v for v in vals if np.isfinite(v)]
            if vals:
                aux[key] = float(np.mean(vals))
        rec["aux"] = ";".join(f"{k}={v:.6g}" for k, v in aux.items())
        rec["_aux"] = aux
        out.append(rec)
    order = {m: i for i, m in enumerate(METHODS)}
    out.sort(key=lambda r: (r["setting"], r["scenario"], order.get(r["method"], 99)))
    return out


def boxplot_rows(replicates: list[dict]) -> list[dict]:
    rows = []
    for r in replicates:
        est = _as_float(r["estimate"])
        if np.isfinite(est):
            rows.append({"setting": r["setting"], "scenario": r["scenario"], "method": r["method"],
                         "rep": int(r["rep"]), "hr": math.exp(est)})
    return rows


def run_benchmark(cfg: BenchmarkConfig, progress: Callable[[str], None] | None = None) -> BenchmarkReport:
    tasks = [(cfg, st, sc, rep) for st in cfg.settings for sc in cfg.scenarios for rep in range(cfg.reps)]
    if cfg.jobs == 1:
        results = []
        for t in tasks:
            results.append(_run_task(t))
            if progress:
                progress(f"{t[1]}-{t[2]} rep {t[3] + 1}/{cfg.reps}")
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    replicates = [row for rows in results for row in rows]
    contingency = []
    for row in replicates:
        for c in row.pop("_contingency", []):
            contingency.append({"setting": row["setting"], "scenario": row["scenario"], "rep": row["rep"], **c})
    metrics = aggregate(replicates)
    for m in metrics:
        m.pop("_aux", None)
    return BenchmarkReport(replicates, metrics, boxplot_rows(replicates), contingency)


def with_methods(cfg: BenchmarkConfig, methods: Iterable[str]) -> BenchmarkConfig:
    return replace(cfg, methods=tuple(methods))
