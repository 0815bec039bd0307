"""
Experiment driver.

Subcommands: ``prepare``, ``fit-eval``, ``grid-search``, ``sweep-beta`` and
``filter-curve``.  Settings come from an INI-style ``key = value`` file with
sections (see ``DEFAULTS``); ``--seed``, ``--out``, ``--threads`` and
``--set section.key=value`` override it.  Every command writes the resolved
configuration as ``config.resolved.ini`` in the output directory, and
wall-clock information only to ``run_info.json`` so that every other output
is byte-reproducible.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .convlab import filter_response
from .evaluation import EvalReport, evaluate, phase_matrices
from .ingest import CsvSpec, SplitDataset, k_core_filter, load_split, load_triplets, save_split, split_per_user
from .models import (
    fit_ease,
    fit_pure_svd,
    fit_psge,
    fit_psge_factors,
    psge_from_factors,
    save_model,
)
from .spectral import ConvergenceError, SolverConfig

_log = logging.getLogger("spectralrec")

MODELS = ("psge", "puresvd", "sgmc", "ease")

DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "path": "",
        "split_dir": "",
        "delimiter": ",",
        "user_col": "0",
        "item_col": "1",
        "weight_col": "2",
        "timestamp_col": "",
        "header": "false",
        "min_rating": "",
        "layout": "triplets",
        "encoding": "utf-8",
    },
    "split": {"k_core": "10", "seed": "0", "ratios": "0.8,0.1,0.1"},
    "model": {"name": "psge", "alpha": "0.5", "beta": "0.5", "beta_tilde": "", "f": "64", "lambda_reg": "500"},
    "solver": {"tol": "1e-8", "max_iter": "", "seed": "0", "ncv": "", "strict": "false"},
    "eval": {"phase": "test", "cutoffs": "5,20", "batch_size": "512"},
    "grid": {
        "alpha": "0:1:0.1",
        "beta": "0:1:0.1",
        "f": "",
        "lambda_reg": "",
        "select_cutoff": "20",
        "jobs": "1",
        "final_test": "true",
    },
    "sweep": {"beta_tilde": "0:1:0.1", "cutoff": "20"},
    "filter": {"k": "1,2,3,4", "lambda_points": "201"},
    "output": {"dir": "out"},
}


class UsageError(Exception):
    pass


def parse_grid(text: str, cast=float) -> list:
    """
    ``"a,b,c"`` lists or inclusive ``"start:stop:step"`` ranges (rounded to
    10 decimals so ``0:1:0.1`` gives exactly 0.0, 0.1, ..., 1.0).
    """
    text = text.strip()
    if not text:
        return []
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        if step <= 0:
            raise UsageError(f"bad range {text!r}")
        count = int(round((stop - start) / step)) + 1
        return [cast(round(start + i * step, 10)) for i in range(count)]
    return [cast(x) for x in text.split(",") if x.strip()]


def load_config(path: str | Path | None, overrides: list[str] = ()) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is not None:
        with open(path, encoding="utf-8") as f:
            cp.read_file(f)
        # relative data paths in a config file are relative to that file
        for key in ("path", "split_dir"):
            value = cp.get("data", key).strip()
            if value and not Path(value).is_absolute():
                cp.set("data", key, str((Path(path).parent / value).resolve()))
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value.strip())
    return cp


def _opt(cp, section, key, cast=str):
    raw = cp.get(section, key, fallback="").strip()
    if raw == "":
        return None
    if cast is bool:
        return cp.getboolean(section, key)
    return cast(raw)


@dataclass
class ExperimentConfig:
    "Typed view over the resolved configuration."

    cp: configparser.ConfigParser

    @property
    def out(self) -> Path:
        return Path(self.cp.get("output", "dir"))

    def csv_spec(self) -> CsvSpec:
        delim = self.cp.get("data", "delimiter")
        delim = {"\\t": "\t", "tab": "\t", "space": " "}.get(delim, delim)
        return CsvSpec(
            delimiter=delim,
            user_col=_opt(self.cp, "data", "user_col", int),
            item_col=_opt(self.cp, "data", "item_col", int),
            weight_col=_opt(self.cp, "data", "weight_col", int),
            timestamp_col=_opt(self.cp, "data", "timestamp_col", int),
            header=self.cp.getboolean("data", "header"),
            min_rating=_opt(self.cp, "data", "min_rating", float),
            layout=self.cp.get("data", "layout"),
            encoding=self.cp.get("data", "encoding"),
        )

    @property
    def split_dir(self) -> Path:
        d = _opt(self.cp, "data", "split_dir")
        return Path(d) if d else self.out / "split"

    @property
    def k_core(self) -> int:
        return self.cp.getint("split", "k_core")

    @property
    def seed(self) -> int:
        return self.cp.getint("split", "seed")

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(parse_grid(self.cp.get("split", "ratios")))

    def solver(self) -> SolverConfig:
        return SolverConfig(
            tol=self.cp.getfloat("solver", "tol"),
            max_iter=_opt(self.cp, "solver", "max_iter", int),
            seed=self.cp.getint("solver", "seed"),
            ncv=_opt(self.cp, "solver", "ncv", int),
            strict=self.cp.getboolean("solver", "strict"),
        )

    @property
    def model_name(self) -> str:
        name = self.cp.get("model", "name").strip().lower()
        if name not in MODELS:
            raise UsageError(f"unknown model {name!r}; choose from {', '.join(MODELS)}")
        return name

    def model_params(self) -> dict:
        name = self.model_name
        if name == "sgmc":
            return {"alpha": 0.5, "beta": 0.5, "beta_tilde": 0.5, "f": self.cp.getint("model", "f")}
        if name == "psge":
            beta = self.cp.getfloat("model", "beta")
            bt = _opt(self.cp, "model", "beta_tilde", float)
            return {
                "alpha": self.cp.getfloat("model", "alpha"),
                "beta": beta,
                "beta_tilde": beta if bt is None else bt,
                "f": self.cp.getint("model", "f"),
            }
        if name == "puresvd":
            return {"f": self.cp.getint("model", "f")}
        return {"lambda_reg": self.cp.getfloat("model", "lambda_reg")}

    @property
    def phase(self) -> str:
        phase = self.cp.get("eval", "phase").strip()
        if phase not in ("validation", "test"):
            raise UsageError(f"phase must be 'validation' or 'test', got {phase!r}")
        return phase

    @property
    def cutoffs(self) -> list[int]:
        return parse_grid(self.cp.get("eval", "cutoffs"), int)

    @property
    def batch_size(self) -> int:
        return self.cp.getint("eval", "batch_size")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_resolved(cfg: ExperimentConfig, command: str) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "config.resolved.ini", "w", encoding="utf-8") as f:
        f.write(f"# resolved configuration for `{command}`\n")
        cfg.cp.write(f)


def _write_run_info(cfg: ExperimentConfig, command: str, started: float) -> None:
    info = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "elapsed_seconds": round(time.time() - started, 3),
    }
    (cfg.out / "run_info.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")


def build_split(cfg: ExperimentConfig) -> SplitDataset:
    path = _opt(cfg.cp, "data", "path")
    if not path:
        raise UsageError("[data] path is not set")
    raw = load_triplets(path, cfg.csv_spec())
    core = k_core_filter(raw, cfg.k_core)
    return split_per_user(core, cfg.ratios, cfg.seed, k_core=cfg.k_core)


def cmd_prepare(cfg: ExperimentConfig) -> SplitDataset:
    "Load, de-duplicate, k-core filter, split and persist a dataset."
    ds = build_split(cfg)
    save_split(ds, cfg.split_dir)
    st = ds.stats()
    _log.info(
        "prepared %d users, %d items, %d interactions -> %s",
        st["n_users"],
        st["n_items"],
        st["n_interactions"],
        cfg.split_dir,
    )
    return ds


def obtain_split(cfg: ExperimentConfig) -> SplitDataset:
    if (cfg.split_dir / "meta.json").exists():
        ds = load_split(cfg.split_dir)
        if ds.seed != cfg.seed:
            _log.warning("split in %s was made with seed %d, config says %d", cfg.split_dir, ds.seed, cfg.seed)
        return ds
    return cmd_prepare(cfg)


def fit_model(name: str, params: dict, R, solver: SolverConfig):
    if name in ("psge", "sgmc"):
        return fit_psge(R, params["alpha"], params["beta"], params["f"], solver, beta_tilde=params["beta_tilde"])
    if name == "puresvd":
        return fit_pure_svd(R, params["f"], solver)
    if name == "ease":
        return fit_ease(R, params["lambda_reg"])
    raise UsageError(f"unknown model {name!r}")


def cmd_fit_eval(cfg: ExperimentConfig) -> EvalReport:
    "Fit the configured model on the phase's training data and evaluate it."
    name, params = cfg.model_name, cfg.model_params()
    ds = obtain_split(cfg)
    phase = cfg.phase
    fit_m, _, _ = phase_matrices(ds, phase)
    model = fit_model(name, params, fit_m, cfg.solver())
    report = evaluate(model, ds, phase, cfg.cutoffs, batch_size=cfg.batch_size, metadata={"model": name})
    out = cfg.out
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    if {5, 20} <= set(cfg.cutoffs):
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    save_model(out / "model.bin", model)
    _log.info("%s %s: %s", name, phase, {f"ndcg@{c}": round(v, 4) for c, v in report.ndcg.items()})
    return report


def _grid_points(cfg: ExperimentConfig) -> tuple[str, list[dict]]:
    name = cfg.model_name
    fs = parse_grid(cfg.cp.get("grid", "f"), int) or [cfg.cp.getint("model", "f")]
    if name == "psge":
        alphas = parse_grid(cfg.cp.get("grid", "alpha")) or [cfg.cp.getfloat("model", "alpha")]
        betas = parse_grid(cfg.cp.get("grid", "beta")) or [cfg.cp.getfloat("model", "beta")]
        return name, [{"alpha": a, "beta": b, "f": f} for a in alphas for b in betas for f in fs]
    if name == "sgmc":
        return name, [{"alpha": 0.5, "beta": 0.5, "f": f} for f in fs]
    if name == "puresvd":
        return name, [{"f": f} for f in fs]
    lams = parse_grid(cfg.cp.get("grid", "lambda_reg")) or [cfg.cp.getfloat("model", "lambda_reg")]
    return name, [{"lambda_reg": lam} for lam in lams]


def cmd_grid_search(cfg: ExperimentConfig) -> dict:
    """
    Exhaustive validation-set grid search.  For spectral models one
    factorisation with the largest ``f`` is computed per ``(alpha, beta)``
    and truncated for the smaller ones.  Writes ``leaderboard.csv`` (best
    first) and ``best.json``; with ``final_test`` the best configuration is
    refitted on train + validation and evaluated on test.
    """
    name, points = _grid_points(cfg)
    ds = obtain_split(cfg)
    cutoffs = cfg.cutoffs
    sel = cfg.cp.getint("grid", "select_cutoff")
    if sel not in cutoffs:
        cutoffs = sorted(set(cutoffs) | {sel})
    solver = cfg.solver()
    train = ds.train

    def run_group(key):
        group = [p for p in points if _group_key(name, p) == key]
        out = []
        if name in ("psge", "sgmc", "puresvd"):
            fmax = max(p["f"] for p in group)
            a, b = (group[0]["alpha"], group[0]["beta"]) if name != "puresvd" else (0.0, 0.0)
            if name == "puresvd":
                full = fit_pure_svd(train, fmax, solver)
            else:
                full = psge_from_factors(train, fit_psge_factors(train, a, b, fmax, solver))
            for p in group:
                model = full.truncate(p["f"])
                out.append((p, evaluate(model, ds, "validation", cutoffs, batch_size=cfg.batch_size)))
        else:
            for p in group:
                model = fit_ease(train, p["lambda_reg"])
                out.append((p, evaluate(model, ds, "validation", cutoffs, batch_size=cfg.batch_size)))
        return out

    keys = list(dict.fromkeys(_group_key(name, p) for p in points))
    jobs = max(1, cfg.cp.getint("grid", "jobs"))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            groups = list(pool.map(run_group, keys))
    else:
        groups = [run_group(k) for k in keys]
    results = [r for g in groups for r in g]
    order = {_point_id(p): n for n, p in enumerate(points)}
    results.sort(key=lambda pr: (-pr[1].ndcg[sel], order[_point_id(pr[0])]))

    pkeys = list(points[0].keys())
    header = pkeys + [f"ndcg@{c}" for c in cutoffs] + [f"recall@{c}" for c in cutoffs] + [f"avg_popularity@{c}" for c in cutoffs]
    rows = [
        [p[k] for k in pkeys]
        + [r.ndcg[c] for c in cutoffs]
        + [r.recall[c] for c in cutoffs]
        + [r.avg_popularity[c] for c in cutoffs]
        for p, r in results
    ]
    write_csv(cfg.out / "leaderboard.csv", header, rows)
    best_p, best_r = results[0]
    best = {"model": name, "hyperparameters": best_p, "validation": best_r.to_dict()}
    if cfg.cp.getboolean("grid", "final_test"):
        params = dict(best_p)
        if name in ("psge", "sgmc"):
            params["beta_tilde"] = params["beta"]
        fit_m, _, _ = phase_matrices(ds, "test")
        model = fit_model(name, params, fit_m, solver)
        final = evaluate(model, ds, "test", cfg.cutoffs, batch_size=cfg.batch_size, metadata={"model": name})
        best["test"] = final.to_dict()
        (cfg.out / "final_report.json").write_text(final.to_json(), encoding="utf-8")
    (cfg.out / "best.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _log.info("best %s: %s (validation ndcg@%d=%.4f)", name, best_p, sel, best_r.ndcg[sel])
    return best


def _group_key(name, p):
    if name in ("psge", "sgmc"):
        return (p["alpha"], p["beta"])
    if name == "puresvd":
        return ()
    return (p["lambda_reg"],)


def _point_id(p: dict):
    return tuple(sorted(p.items()))


def cmd_sweep_beta(cfg: ExperimentConfig) -> list[list[float]]:
    """
    Fit PSGE once and re-score it for every prediction-time item exponent.
    Writes ``sweep_beta.csv`` with columns ``beta_tilde, ndcg@c,
    avg_popularity@c``.
    """
    if cfg.model_name not in ("psge", "sgmc"):
        raise UsageError("sweep-beta needs a psge or sgmc model")
    params = cfg.model_params()
    grid = parse_grid(cfg.cp.get("sweep", "beta_tilde"))
    c = cfg.cp.getint("sweep", "cutoff")
    ds = obtain_split(cfg)
    phase = cfg.phase
    fit_m, _, _ = phase_matrices(ds, phase)
    model = fit_psge(fit_m, params["alpha"], params["beta"], params["f"], cfg.solver())
    rows = []
    for bt in grid:
        r = evaluate(model.with_beta_tilde(bt), ds, phase, [c], batch_size=cfg.batch_size)
        rows.append([bt, r.ndcg[c], r.avg_popularity[c]])
    write_csv(cfg.out / "sweep_beta.csv", ["beta_tilde", f"ndcg@{c}", f"avg_popularity@{c}"], rows)
    pops = [r[2] for r in rows]
    if any(b < a - 1e-9 for a, b in zip(pops, pops[1:])):
        _log.warning("average popularity is not monotone in beta_tilde")
    return rows


def lambda_grid(points: int) -> list[float]:
    "``points`` evenly spaced values on [-1, 1], exact at the rational nodes."
    if points < 2:
        raise UsageError("need at least two lambda points")
    return [(2 * i - (points - 1)) / (points - 1) for i in range(points)]


def cmd_filter_curve(cfg: ExperimentConfig, k_list=None, lambdas=None) -> list[list]:
    "Tabulate the uniform-propagation spectral gain; writes ``filter_curve.csv``."
    ks = k_list if k_list is not None else parse_grid(cfg.cp.get("filter", "k"), int)
    lams = lambdas if lambdas is not None else lambda_grid(cfg.cp.getint("filter", "lambda_points"))
    rows = [[k, lam, filter_response(lam, k)] for k in ks for lam in lams]
    write_csv(cfg.out / "filter_curve.csv", ["k", "lambda", "response"], rows)
    return rows


COMMANDS = {
    "prepare": cmd_prepare,
    "fit-eval": cmd_fit_eval,
    "grid-search": cmd_grid_search,
    "sweep-beta": cmd_sweep_beta,
    "filter-curve": cmd_filter_curve,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectralrec", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="configuration file")
    common.add_argument("--seed", type=int, help="split and solver seed")
    common.add_argument("--out", "-o", help="output directory")
    common.add_argument("--threads", type=int, help="limit BLAS threads")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or "").strip().split("\n")[0])
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cp = load_config(args.config, args.set)
        if args.seed is not None:
            cp.set("split", "seed", str(args.seed))
            cp.set("solver", "seed", str(args.seed))
        if args.out is not None:
            cp.set("output", "dir", args.out)
        cfg = ExperimentConfig(cp)
        if args.command in ("fit-eval", "grid-search", "sweep-beta"):
            cfg.model_name  # validate before doing any work
    except (UsageError, configparser.Error, ValueError, OSError) as e:
        parser.error(str(e))

    started = time.time()
    try:
        _write_resolved(cfg, args.command)
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                COMMANDS[args.command](cfg)
        else:
            COMMANDS[args.command](cfg)
    except UsageError as e:
        parser.error(str(e))
    except (ValueError, ConvergenceError, OSError) as e:
        print(f"spectralrec {args.command}: error: {e}", file=sys.stderr)
        return 1
    _write_run_info(cfg, args.command, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
