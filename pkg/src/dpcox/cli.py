"""Command-line entry point: ``dpcox simulate | fit | benchmark | report``.

Configuration is an INI-style file of ``key = value`` lines.  Keys before any
section header belong to ``[run]``; ``[mcmc]`` and ``[prior]`` hold sampler
and hyperparameter settings.  Flags override file values.  Every command
writes a manifest in the same format with the fully resolved configuration,
so ``--config manifest`` reproduces a run.

Exit codes: 0 success, 1 I/O or runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import configparser
import os
import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .baselines import fit_2sls, fit_2sri, fit_infeasible, fit_naive
from .bench import METHODS, BenchmarkConfig, aggregate, boxplot_rows, read_rows, run_benchmark, write_rows, METRIC_COLUMNS
from .data import DatasetError, read_dataset_csv, write_dataset_csv
from .dgm import generate_dataset, make_scenario
from .regression import PriorConfig
from .sampler import ConfigError, McmcConfig, posterior_summary, run_chain

OUTPUT_ENV = "DPCOX_OUTPUT_DIR"
DEFAULT_OUTPUT = "dpcox_out"


class UsageError(Exception):
    """Bad flags or configuration (exit 2)."""


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    setting: str = "easy"
    scenario: str = "a"
    n: int = 600
    reps: int = 50
    methods: tuple[str, ...] = METHODS
    method: str = "proposed"
    seed: int = 0
    jobs: int = 1
    level: float = 0.95
    data: str = ""
    input: str = ""
    out: str = ""
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)


# config key -> McmcConfig field; "iters"/"burnin" are the short spellings
_MCMC_ALIASES = {"iters": "total_iters", "burnin": "burn_in"}
_MCMC_KEYS = {"iters", "burnin"} | {f.name for f in fields(McmcConfig)} - {"total_iters", "burn_in", "seed"}
_PRIOR_KEYS = {f.name for f in fields(PriorConfig)}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"mcmc", "prior"}
_SECTIONS = {"run": _RUN_KEYS, "mcmc": _MCMC_KEYS, "prior": _PRIOR_KEYS}


def _key_line(text: str, section: str, key: str) -> int:
    """1-based line of ``key`` inside ``section`` of the original file text."""
    current = "run"
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip().lower()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return no
    return 0


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, str]]:
    """Raw ``{section: {key: value}}`` with unknown sections and keys rejected."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    body = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.strip().startswith(("#", ";"))]
    shift = 0 if body and body[0].startswith("[") else 1  # implicit [run] header for leading keys
    try:
        cp.read_string("[run]\n" * shift + text, source=source)
    except configparser.DuplicateSectionError as exc:
        raise UsageError(f"{source}:{(exc.lineno or 1) - shift}: duplicate section [{exc.section}]") from None
    except configparser.DuplicateOptionError as exc:
        raise UsageError(f"{source}:{(exc.lineno or 1) - shift}: duplicate key {exc.option!r}") from None
    except configparser.ParsingError as exc:
        raise UsageError(f"{source}:{exc.errors[0][0] - shift}: cannot parse line") from None
    except configparser.Error as exc:
        raise UsageError(f"{source}: {exc}") from None
    out: dict[str, dict[str, str]] = {}
    for sec in cp.sections():
        name = sec.strip().lower()
        if name not in _SECTIONS:
            raise UsageError(f"{source}: unknown section [{sec}]")
        allowed = _SECTIONS[name] | (_MCMC_KEYS | _PRIOR_KEYS if name == "run" else set())
        for key, value in cp.items(sec):
            if key not in allowed:
                raise UsageError(f"{source}:{_key_line(text, name, key)}: unknown key {key!r} in [{name}]")
            out.setdefault(name, {})[key] = value
    return out


def _convert(value: str, kind: Any, name: str) -> Any:
    kind = str(kind)
    v = value.strip()
    try:
        if "bool" in kind:
            low = v.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if kind.startswith("int"):
            return int(v)
        if kind.startswith("float"):
            return float(v)
        if "tuple" in kind:
            return tuple(s.strip() for s in v.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"invalid value for {name}: {value!r}") from None
    return v


_TYPES = {
    **{f.name: f.type for f in fields(RunConfig)},
    **{f.name: f.type for f in fields(McmcConfig)},
    **{f.name: f.type for f in fields(PriorConfig)},
}


def build_config(raw: dict[str, dict[str, str]], overrides: dict[str, str] | None = None) -> RunConfig:
    """Resolve raw strings (file, then overrides) into a validated RunConfig."""
    flat: dict[str, str] = {}
    for sec in ("run", "mcmc", "prior"):
        flat.update(raw.get(sec, {}))
    flat.update(overrides or {})
    run_kw: dict[str, Any] = {}
    mcmc_kw: dict[str, Any] = {}
    prior_kw: dict[str, Any] = {}
    for key, value in flat.items():
        if key in _MCMC_KEYS:
            name = _MCMC_ALIASES.get(key, key)
            mcmc_kw[name] = _convert(value, _TYPES[name], key)
        elif key in _PRIOR_KEYS:
            prior_kw[key] = _convert(value, _TYPES[key], key)
        elif key in _RUN_KEYS:
            run_kw[key] = _convert(value, _TYPES[key], key)
        else:
            raise UsageError(f"unknown key {key!r}")
    cfg = RunConfig(**run_kw)
    try:
        cfg.mcmc = McmcConfig(seed=cfg.seed, **mcmc_kw)
        cfg.prior = PriorConfig(**prior_kw)
    except (ConfigError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    _validate_run(cfg)
    return cfg


def _validate_run(cfg: RunConfig) -> None:
    if cfg.setting not in ("easy", "hard"):
        raise UsageError(f"invalid value for setting: {cfg.setting!r}")
    if cfg.scenario not in ("a", "b", "c", "d"):
        raise UsageError(f"invalid value for scenario: {cfg.scenario!r}")
    if cfg.n < 2:
        raise UsageError("invalid value for n: must be at least 2")
    if cfg.reps < 2:
        raise UsageError("invalid value for reps: must be at least 2")
    if cfg.jobs < 1:
        raise UsageError("invalid value for jobs: must be at least 1")
    if not 0.0 < cfg.level < 1.0:
        raise UsageError("invalid value for level: must lie in (0, 1)")
    if cfg.method not in METHODS:
        raise UsageError(f"invalid value for method: {cfg.method!r}")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad or not cfg.methods:
        raise UsageError(f"invalid value for methods: {','.join(bad) or 'empty'}")


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return build_config(parse_config_text(text, str(path or "<config>")), overrides)


def _fmt_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return str(v)


def manifest_text(cfg: RunConfig, command: str) -> str:
    lines = [f"# dpcox {__version__} manifest", f"# command: {command}", "[run]"]
    for f in fields(RunConfig):
        if f.name not in ("mcmc", "prior"):
            lines.append(f"{f.name} = {_fmt_value(getattr(cfg, f.name))}")
    lines.append("[mcmc]")
    inv = {v: k for k, v in _MCMC_ALIASES.items()}
    for f in fields(McmcConfig):
        if f.name != "seed":
            lines.append(f"{inv.get(f.name, f.name)} = {_fmt_value(getattr(cfg.mcmc, f.name))}")
    lines.append("[prior]")
    for f in fields(PriorConfig):
        lines.append(f"{f.name} = {_fmt_value(getattr(cfg.prior, f.name))}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# commands


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def cmd_simulate(cfg: RunConfig) -> None:
    scn = make_scenario(cfg.setting, cfg.scenario, cfg.n)
    ds = generate_dataset(scn, np.random.SeedSequence(cfg.seed))
    out = Path(cfg.out) if cfg.out else _out_dir(cfg) / f"{scn.label}-n{cfg.n}-seed{cfg.seed}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(ds, out)
    Path(str(out) + ".manifest").write_text(manifest_text(cfg, "simulate"), encoding="utf-8")
    _progress(f"wrote {out} ({ds.n} rows, {int(ds.event.sum())} events)")


_FITTERS = {"naive": fit_naive, "infeasible": fit_infeasible, "2sls": fit_2sls, "2sri": fit_2sri}


def cmd_fit(cfg: RunConfig) -> None:
    if not cfg.data:
        raise UsageError("fit needs --data")
    ds = read_dataset_csv(cfg.data)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.method == "proposed":
        draws = run_chain(ds, cfg.mcmc, cfg.prior, rng=np.random.default_rng(np.random.SeedSequence(cfg.seed)))
        draws.write_csv(out / "draws.csv")
        summ = posterior_summary(draws, cfg.level)
        write_rows(out / "summary.csv", summ.rows(), ["param", "mean", "sd", "lo", "hi"])
        write_rows(out / "labels.csv", [{"id": int(i), "cluster": int(c)} for i, c in zip(ds.ids, draws.final_labels)],
                   ["id", "cluster"])
        _progress(f"{len(draws)} draws, beta_a mean {summ.mean[0]:.4f}, acceptance {draws.acceptance_rate:.2f}")
    else:
        if cfg.method == "infeasible" and ds.true_cluster is None:
            raise UsageError("infeasible fit needs a true_cluster column in the data")
        fr = _FITTERS[cfg.method](ds, level=cfg.level)
        write_rows(out / "fit.csv", fr.rows(cfg.method), ["method", "param", "estimate", "se", "lo", "hi", "converged"])
        _progress(f"{cfg.method}: beta_a {fr.estimate[0]:.4f} (se {fr.se[0]:.4f})")
    (out / "manifest").write_text(manifest_text(cfg, "fit"), encoding="utf-8")


def cmd_benchmark(cfg: RunConfig) -> None:
    bcfg = BenchmarkConfig(
        settings=(cfg.setting,), scenarios=(cfg.scenario,), methods=cfg.methods, reps=cfg.reps, n=cfg.n,
        master_seed=cfg.seed, jobs=cfg.jobs, level=cfg.level, mcmc=cfg.mcmc, prior=cfg.prior,
    )
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    report = run_benchmark(bcfg, progress=_progress)
    report.write(out)
    (out / "manifest").write_text(manifest_text(cfg, "benchmark"), encoding="utf-8")
    for row in report.metrics:
        _progress(f"{row['method']:>10}  bias {row['bias']:+.4f}  ese {row['ese']:.4f}  "
                  f"rmse {row['rmse']:.4f}  cp {row['cp']:.3f}  failed {row['n_failed']}")


def cmd_report(cfg: RunConfig) -> None:
    if not cfg.input:
        raise UsageError("report needs --input (a benchmark output directory or replicates.csv)")
    src = Path(cfg.input)
    if src.is_dir():
        src = src / "replicates.csv"
    rows = read_rows(src)
    metrics = aggregate(rows)
    for m in metrics:
        m.pop("_aux", None)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "metrics.csv", metrics, METRIC_COLUMNS)
    write_rows(out / "boxplot.csv", boxplot_rows(rows), ["setting", "scenario", "method", "rep", "hr"])
    (out / "manifest").write_text(manifest_text(cfg, "report"), encoding="utf-8")
    _progress(f"aggregated {len(rows)} replicate rows into {len(metrics)} metric rows")


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "benchmark": cmd_benchmark, "report": cmd_report}


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # raise instead of exiting so main() owns the exit code
        raise UsageError(f"{self.prog}: {message}")


# flag dest -> config key
_FLAG_KEYS = {
    "setting": "setting", "scenario": "scenario", "n": "n", "reps": "reps", "methods": "methods",
    "method": "method", "seed": "seed", "jobs": "jobs", "level": "level", "data": "data", "input": "input",
    "out": "out", "iters": "iters", "burnin": "burnin", "thin": "thin", "beta_step": "beta_step",
    "beta_sampler": "beta_sampler",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="configuration file (INI-style key = value)")
    common.add_argument("--seed", help="master seed (overrides the file)")
    common.add_argument("--out", help=f"output path; defaults to ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key, repeatable")
    scen = _Parser(add_help=False)
    scen.add_argument("--setting", choices=("easy", "hard"))
    scen.add_argument("--scenario", choices=("a", "b", "c", "d"))
    scen.add_argument("--n")
    mc = _Parser(add_help=False)
    mc.add_argument("--iters", help="total MCMC iterations")
    mc.add_argument("--burnin", help="burn-in iterations")
    mc.add_argument("--thin")
    mc.add_argument("--beta-step", dest="beta_step")
    mc.add_argument("--beta-sampler", dest="beta_sampler", choices=("random-walk", "langevin"))
    mc.add_argument("--level", help="interval level")

    p = _Parser(prog="dpcox", description="DP-mixture Cox regression and simulation benchmark")
    p.add_argument("--version", action="version", version=f"dpcox {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True
    sub.add_parser("simulate", parents=[common, scen], help="write one simulated dataset")
    f = sub.add_parser("fit", parents=[common, mc], help="fit one estimator to a dataset CSV")
    f.add_argument("--data", help="dataset CSV")
    f.add_argument("--method", choices=METHODS)
    b = sub.add_parser("benchmark", parents=[common, scen, mc], help="run the replication study")
    b.add_argument("--reps")
    b.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    b.add_argument("--jobs", help="parallel worker processes")
    r = sub.add_parser("report", parents=[common], help="re-aggregate replicates.csv into metrics")
    r.add_argument("--input", help="benchmark output directory or replicates.csv")
    return p


def _overrides(ns: argparse.Namespace) -> dict[str, str]:
    over: dict[str, str] = {}
    for item in ns.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip().lower()
        if k not in _RUN_KEYS | _MCMC_KEYS | _PRIOR_KEYS:
            raise UsageError(f"unknown key {k!r}")
        over[k] = v
    for dest, key in _FLAG_KEYS.items():
        val = getattr(ns, dest, None)
        if val is not None:
            over[key] = str(val)
    return over


def run_command(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        cfg = load_config(ns.config, _overrides(ns))
        COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    code = run_command(argv)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
