"""corrdiff command line: fit, infer, baseline, simulate, validate.

Exit codes: 0 success, 2 input or config error, 3 numerical failure.
"""
import argparse
import json
import logging
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NumericalError, ValidationError
from .estimate import FitConfig, fit
from .infer import gee_covariance, jackknife, mass_univariate, median_center, wald_inference
from .io import (
    ConfigError,
    RunManifest,
    config_digest,
    file_digest,
    ingest,
    now_iso,
    read_config,
    resolve_threads,
    write_group_averages,
    write_json,
    write_matrix_csv,
    write_rows_csv,
)
from .link import LINKS
from .simulate import EXPERIMENTS, RNG_ALGORITHM, experiment_driver, resolve_grid

log = logging.getLogger("corrdiff")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3
FIT_KEYS = {f.name for f in fields(FitConfig)} | {"link", "seed"}


class JsonLineHandler(logging.Handler):
    def __init__(self, path):
        super().__init__(logging.INFO)
        self.fh = open(path, "a")

    def emit(self, record):
        entry = {"time": now_iso(), "level": record.levelname, "logger": record.name,
                 "message": record.getMessage()}
        self.fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()
        super().close()


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads (fallback: CORRDIFF_THREADS)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", type=Path, required=True,
                      help="CSV with columns subject_id, group (H|D), path")
    data.add_argument("--labels", type=Path, help="CSV with columns index, name")
    data.add_argument("--link", choices=sorted(LINKS), help="link function (overrides the config)")

    parser = argparse.ArgumentParser(prog="corrdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"corrdiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common, data], help="estimate theta and alpha")
    p_inf = sub.add_parser("infer", parents=[common, data], help="fit, then test each alpha")
    p_inf.add_argument("--variance", choices=("gee", "jackknife"), default="gee")
    p_inf.add_argument("--inflate", type=float,
                       help="SD inflation (default 1.10 for gee, 1.0 for jackknife)")
    p_inf.add_argument("--q", type=float, default=0.05, help="BH level")
    p_inf.add_argument("--no-median-correction", action="store_true")
    p_base = sub.add_parser("baseline", parents=[common, data], help="mass-univariate Welch tests")
    p_base.add_argument("--q", type=float, default=0.05)
    p_sim = sub.add_parser("simulate", parents=[common], help="run a simulation experiment")
    p_sim.add_argument("--experiment", required=True, help=f"one of {', '.join(EXPERIMENTS)}")
    sub.add_parser("validate", parents=[common, data], help="ingest and validate a sample")
    return parser


class Run:
    """Shared bookkeeping for one command: config, logging, manifest."""

    def __init__(self, args, allowed_keys):
        self.args = args
        self.out = args.out
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = now_iso()
        self.config = read_config(args.config) if args.config else {}
        unknown = sorted(set(self.config) - set(allowed_keys))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        self.seed = args.seed if args.seed is not None else int(self.config.get("seed", 0))
        self.threads = resolve_threads(args.threads)
        self.inputs = [args.config] if args.config else []
        self.handler = JsonLineHandler(self.out / "diagnostics.jsonl")
        logging.getLogger("corrdiff").addHandler(self.handler)

    def fit_config(self):
        try:
            return FitConfig.from_mapping(self.config)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid fit config: {exc}") from None

    def link(self):
        name = getattr(self.args, "link", None) or self.config.get("link", "multiplicative")
        if name not in LINKS:
            raise ConfigError(f"unknown link {name!r}; expected one of {sorted(LINKS)}")
        return name

    def ingest(self):
        args = self.args
        data = ingest(args.manifest, args.labels)
        self.inputs += [args.manifest] + ([args.labels] if args.labels else []) + list(data.files)
        if data.dropped:
            log.warning("dropped variables (1-based): %s", [k + 1 for k in data.dropped])
        return data

    def finish(self, extra=None):
        resolved = dict(self.config, seed=self.seed)
        manifest = RunManifest(
            command=self.args.command,
            config_digest=config_digest(resolved),
            input_digests={str(p): file_digest(p) for p in self.inputs},
            software_version=__version__,
            seed=self.seed,
            started=self.started,
            finished=now_iso(),
            extra=extra or {},
        )
        manifest.write(self.out / "manifest.json")

    def close(self):
        logging.getLogger("corrdiff").removeHandler(self.handler)
        self.handler.close()


def _fit(run, data):
    res = fit(data.sample, run.link(), run.fit_config())
    if res.applied_lambda:
        log.warning("applied weight shrinkage lambda = %r", res.applied_lambda)
    for msg in res.diagnostics:
        log.info("fit: %s", msg)
    return res


def cmd_fit(run):
    data = run.ingest()
    res = _fit(run, data)
    out = run.out
    write_matrix_csv(res.theta_hat, out / "theta.csv")
    write_json({"alpha": res.alpha_hat, "names": data.labels, "link": res.link}, out / "alpha.json")
    write_json({
        "theta": "theta.csv",
        "alpha": res.alpha_hat,
        "loss_trace": res.loss_trace,
        "converged": res.converged,
        "applied_lambda": res.applied_lambda,
        "outer_iters": res.outer_iters,
        "monotone": res.monotone,
        "stalled_steps": res.stalled_steps,
        "theta_range_violations": res.theta_range_violations,
        "diagnostics": res.diagnostics,
        "link": res.link,
        "n_h": data.sample.n_h,
        "n_d": data.sample.n_d,
        "p": data.sample.p,
        "dropped_variables": [k + 1 for k in data.dropped],
    }, out / "fit_report.json")
    run.finish()


def cmd_infer(run):
    args = run.args
    data = run.ingest()
    link = run.link()
    config = run.fit_config()
    res = _fit(run, data)
    if args.variance == "gee":
        cov = gee_covariance(res, data.sample)
        inflate = 1.10 if args.inflate is None else args.inflate
    else:
        cov = jackknife(data.sample, link, config, res, n_jobs=run.threads).covariance
        inflate = 1.0 if args.inflate is None else args.inflate
    alpha = res.alpha_hat if args.no_median_correction else median_center(res.alpha_hat, link)
    table = wald_inference(alpha, cov, q=args.q, inflate=inflate, link=link, names=data.labels)
    rows = list(table.rows())
    write_rows_csv(rows, run.out / "inference.csv")
    write_json({
        "method": table.method,
        "inflation": table.inflation,
        "q": table.q_level,
        "correction": table.correction_method,
        "median_correction": not args.no_median_correction,
        "n_selected": table.n_selected,
        "ci_level": table.ci_level,
        "excluded": [int(k) + 1 for k in table.excluded],
        "rows": rows,
    }, run.out / "inference.json")
    manhattan = [dict(index=r["index"], name=r["name"], p=r["p"],
                      minus_log10_p=_mlog10(r["p"])) for r in rows]
    write_rows_csv(manhattan, run.out / "manhattan.csv")
    run.finish({"variance": table.method, "inflation": table.inflation})


def _mlog10(p):
    return float(-np.log10(p)) if p > 0 else float("inf")


def cmd_baseline(run):
    data = run.ingest()
    table = mass_univariate(data.sample, run.args.q)
    names = data.labels
    rows = [dict(r, name_k=names[r["k"] - 1], name_l=names[r["l"] - 1]) for r in table.rows()]
    write_rows_csv(rows, run.out / "baseline.csv",
                   ["k", "l", "name_k", "name_l", "t", "df", "p", "p_bh", "selected"])
    manhattan = [dict(variable=k + 1, name=names[k], partner=l + 1, p=float(p), p_bh=float(pa),
                      minus_log10_p=_mlog10(p))
                 for k, l, p, pa in table.variable_pvalues()]
    write_rows_csv(manhattan, run.out / "baseline_manhattan.csv")
    run.finish({"m": len(rows), "n_selected": int(table.selected.sum())})


def cmd_validate(run):
    data = run.ingest()
    s = data.sample
    write_group_averages(s, run.out)
    write_json({
        "valid": True, "n_h": s.n_h, "n_d": s.n_d, "p": s.p,
        "dropped_variables": [k + 1 for k in data.dropped], "names": data.labels,
    }, run.out / "validation.json")
    run.finish()


def cmd_simulate(run):
    kind = run.args.experiment
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {kind!r}; expected one of {', '.join(EXPERIMENTS)}")
    grid_keys = set(resolve_grid(kind))
    unknown = sorted(set(run.config) - grid_keys - FIT_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s) for {kind}: {', '.join(unknown)}")
    grid = {k: v for k, v in run.config.items() if k in grid_keys}
    grid["seed"] = run.seed
    try:
        grid = resolve_grid(kind, grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    fit_cfg = run.fit_config()
    rows = experiment_driver(kind, grid, fit_cfg, n_jobs=run.threads)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    csv_path = run.out / f"{kind}_{stamp}.csv"
    write_rows_csv(rows, csv_path)
    write_json({"experiment": kind, "grid": grid, "seed": run.seed, "rng": RNG_ALGORITHM,
                "software_version": __version__},
               run.out / f"{kind}_{stamp}.json")
    run.finish({"experiment": kind, "table": csv_path.name, "rows": len(rows)})


COMMANDS = {
    "fit": (cmd_fit, FIT_KEYS),
    "infer": (cmd_infer, FIT_KEYS),
    "baseline": (cmd_baseline, FIT_KEYS),
    "validate": (cmd_validate, FIT_KEYS),
    "simulate": (cmd_simulate, None),
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which is also our input-error code
        return exc.code
    stderr = logging.StreamHandler(sys.stderr)
    stderr.setLevel(logging.WARNING)
    stderr.setFormatter(logging.Formatter("corrdiff: %(levelname)s: %(message)s"))
    pkg_log = logging.getLogger("corrdiff")
    pkg_log.setLevel(logging.INFO)
    pkg_log.addHandler(stderr)
    func, keys = COMMANDS[args.command]
    run = None
    try:
        if keys is None:
            keys = read_config(args.config).keys() if args.config else ()
        run = Run(args, keys)
        func(run)
    except (ValidationError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL
    finally:
        if run is not None:
            run.close()
        pkg_log.removeHandler(stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
