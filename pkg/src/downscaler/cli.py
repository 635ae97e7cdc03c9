"""Command-line interface: simulate | fit | predict | evaluate | sensitivity | baseline.

Every subcommand reads one config file (flags --seed/--threads/--out
override it), writes only under the configured output directory, stamps the
config hash into each output, and is byte-reproducible for a fixed
(config, seed) regardless of thread count.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import config as cfgmod
from .data import (
    build_dataset,
    ingest_grid_outputs,
    ingest_monitoring,
    split_train_validation,
    write_grid_outputs_csv,
    write_monitoring_csv,
)
from .errors import DownscalerError
from .evaluation import (
    ScoreReport,
    near_site_set,
    prediction_records,
    score_kriging,
    sensitivity_sweep,
    site_ols_diagnostics,
    write_ols_csv,
    write_sweep_csv,
)
from .inference import ChainSamples, chain_diagnostics, run_chain
from .prediction import PredictionTarget, block_average, contrast, predict
from .simulator import simulate


def _fail(exc: Exception, code: int = 1) -> int:
    sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
    return code


def _load(args):
    cfg = cfgmod.load_config(args.config)
    cfg = cfgmod.apply_overrides(cfg, seed=args.seed, threads=args.threads, out=args.out)
    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    return cfg, out_dir, cfgmod.config_hash(cfg)


def _read_dataset(cfg, monitoring_key="monitoring"):
    paths = cfg.get("paths", {})
    if monitoring_key not in paths:
        raise cfgmod.ConfigError(f"config needs paths.{monitoring_key}")
    for key in (monitoring_key, "grid_outputs"):
        if not os.path.exists(paths[key]):
            raise FileNotFoundError(paths[key])
    sites, obs = ingest_monitoring(paths[monitoring_key])
    outputs = ingest_grid_outputs(paths["grid_outputs"])
    grid = cfgmod.grid_from_config(cfg)
    spec = cfgmod.spec_from_config(cfg)
    return build_dataset(sites, grid, obs, outputs, spec.transform), spec


def cmd_simulate(args) -> int:
    cfg, out_dir, chash = _load(args)
    spec = cfgmod.spec_from_config(cfg)
    truth = cfgmod.truth_from_config(cfg, spec)
    dataset, latent = simulate(truth, seed=cfg["seed"])
    write_monitoring_csv(os.path.join(out_dir, "monitoring.csv"), dataset)
    write_grid_outputs_csv(os.path.join(out_dir, "grid_outputs.csv"), dataset)
    split = cfg.get("simulate", {}).get("split_fraction")
    if split is not None:
        train, validation = split_train_validation(dataset, float(split), cfg["seed"])
        write_monitoring_csv(os.path.join(out_dir, "train_monitoring.csv"), train)
        write_monitoring_csv(os.path.join(out_dir, "validation_monitoring.csv"), validation)
    import json

    with open(os.path.join(out_dir, "simulate_meta.json"), "w") as fh:
        json.dump(
            {
                "config_hash": chash,
                "seed": cfg["seed"],
                "n_sites": len(dataset.sites),
                "n_observations": len(dataset.observations),
                "days": dataset.days,
            },
            fh,
            indent=1,
            sort_keys=True,
        )
    return 0


def cmd_fit(args) -> int:
    cfg, out_dir, chash = _load(args)
    dataset, spec = _read_dataset(cfg)
    fp = cfgmod.fit_params(cfg)
    samples = run_chain(
        dataset,
        spec,
        n_iter=fp["n_iter"],
        burn_in=fp["burn_in"],
        thin=fp["thin"],
        seed=cfg["seed"],
        n_chains=fp["n_chains"],
        threads=cfg["threads"],
    )
    samples.save(os.path.join(out_dir, "chain"), config_hash=chash)
    diag = chain_diagnostics(samples)
    with open(os.path.join(out_dir, "diagnostics.csv"), "w", newline="") as fh:
        fh.write(f"# config_hash: {chash}\n")
        w = csv.writer(fh)
        w.writerow(["parameter", "ess", "rhat", "flag"])
        for name, row in diag["parameters"].items():
            w.writerow([name, repr(row["ess"]), repr(row["rhat"]), row["flag"]])
    return 0


def _targets_from_config(cfg, dataset):
    block = cfg.get("predict", {})
    days = block.get("days", "all")
    days = dataset.days if days == "all" else [int(t) for t in days]
    tblock = block.get("targets", {"kind": "cells", "cell_ids": "all"})
    kind = tblock.get("kind", "cells")
    if kind == "cells":
        cell_ids = tblock.get("cell_ids", "all")
        cells = dataset.grid.cell_ids() if cell_ids == "all" else list(cell_ids)
        return PredictionTarget.cells(cells, days)
    if kind == "region":
        return PredictionTarget.region(list(tblock["cell_ids"]), days)
    if kind == "points":
        from .data import Site

        pts = [Site(str(p["id"]), float(p["lon"]), float(p["lat"])) for p in tblock["points"]]
        return PredictionTarget.points(pts, days)
    raise cfgmod.ConfigError(f"unknown target kind {kind!r}")


def _write_surface(path, pred, chash, method=None):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {chash}\n")
        w = csv.writer(fh)
        cols = ["cell_id", "lon", "lat", "t", "pollutant", "mean", "median", "q025", "q975"]
        if method is not None:
            cols.append("method")
        w.writerow(cols)
        mean, med = pred.mean(), pred.median()
        lo, hi = pred.q025(), pred.q975()
        for a, lab in enumerate(pred.labels):
            for d, t in enumerate(pred.days):
                for i in range(pred.p):
                    row = [
                        lab,
                        repr(float(pred.lons[a])),
                        repr(float(pred.lats[a])),
                        t,
                        i + 1,
                        repr(float(mean[a, d, i])),
                        repr(float(med[a, d, i])),
                        repr(float(lo[a, d, i])),
                        repr(float(hi[a, d, i])),
                    ]
                    if method is not None:
                        row.append(method)
                    w.writerow(row)


def cmd_predict(args) -> int:
    cfg, out_dir, chash = _load(args)
    dataset, spec = _read_dataset(cfg)
    chain_dir = cfg.get("predict", {}).get("chain_dir", os.path.join(out_dir, "chain"))
    if not os.path.exists(os.path.join(chain_dir, "meta.json")):
        raise FileNotFoundError(os.path.join(chain_dir, "meta.json"))
    samples = ChainSamples.load(chain_dir)
    target = _targets_from_config(cfg, dataset)
    include_nugget = bool(cfg.get("predict", {}).get("include_nugget", True))
    pred = predict(samples, dataset, spec, target, seed=cfg["seed"], include_nugget=include_nugget)
    _write_surface(os.path.join(out_dir, "surface.csv"), pred, chash)
    if cfg.get("predict", {}).get("dump_draws", False):
        with open(os.path.join(out_dir, "draws.csv"), "w", newline="") as fh:
            fh.write(f"# config_hash: {chash}\n")
            w = csv.writer(fh)
            w.writerow(["target", "t", "pollutant", "draw", "value"])
            for a, lab in enumerate(pred.labels):
                for d, t in enumerate(pred.days):
                    for i in range(pred.p):
                        for k, v in enumerate(pred.draws[a, d, i]):
                            w.writerow([lab, t, i + 1, k, repr(float(v))])
    contrasts = cfg.get("predict", {}).get("contrasts", [])
    if contrasts:
        with open(os.path.join(out_dir, "contrasts.csv"), "w", newline="") as fh:
            fh.write(f"# config_hash: {chash}\n")
            w = csv.writer(fh)
            w.writerow(["label", "t", "pollutant", "mean", "q025", "q975"])
            for cdef in contrasts:
                avg_a = block_average(pred, cdef["region_a"], label="a")
                avg_b = block_average(pred, cdef["region_b"], label="b")
                diff = contrast(avg_a, avg_b, label=cdef["label"])
                mean, lo, hi = diff.mean(), diff.q025(), diff.q975()
                for d, t in enumerate(diff.days):
                    for i in range(diff.p):
                        w.writerow(
                            [cdef["label"], t, i + 1, repr(float(mean[0, d, i])),
                             repr(float(lo[0, d, i])), repr(float(hi[0, d, i]))]
                        )
    return 0


def cmd_evaluate(args) -> int:
    cfg, out_dir, chash = _load(args)
    train, spec = _read_dataset(cfg)
    paths = cfg.get("paths", {})
    if "validation_monitoring" not in paths:
        raise cfgmod.ConfigError("config needs paths.validation_monitoring")
    if not os.path.exists(paths["validation_monitoring"]):
        raise FileNotFoundError(paths["validation_monitoring"])
    vsites, vobs = ingest_monitoring(paths["validation_monitoring"])
    outputs = ingest_grid_outputs(paths["grid_outputs"])
    validation = build_dataset(vsites, train.grid, vobs, outputs, spec.transform)

    chain_dir = cfg.get("predict", {}).get("chain_dir", os.path.join(out_dir, "chain"))
    if not os.path.exists(os.path.join(chain_dir, "meta.json")):
        raise FileNotFoundError(os.path.join(chain_dir, "meta.json"))
    samples = ChainSamples.load(chain_dir)
    days = sorted(set(validation.days) & set(train.days))
    pred = predict(
        samples, train, spec, PredictionTarget.points(validation.sites, days), seed=cfg["seed"]
    )
    records = prediction_records(pred, validation)
    km = float(cfg.get("evaluate", {}).get("stratify_km", 40.0))
    near = near_site_set(validation, train, km)
    report = ScoreReport.from_records(records, "downscaler", near_sites=near)
    report.to_csv(os.path.join(out_dir, "scores.csv"), config_hash=chash)
    with open(os.path.join(out_dir, "scores.txt"), "w") as fh:
        fh.write(f"# config_hash: {chash}\n")
        fh.write(report.to_text())
    if cfg.get("evaluate", {}).get("ols", False):
        rows = site_ols_diagnostics(train)
        write_ols_csv(rows, os.path.join(out_dir, "ols.csv"), p=train.p, config_hash=chash)
    return 0


def cmd_sensitivity(args) -> int:
    cfg, out_dir, chash = _load(args)
    train, spec = _read_dataset(cfg)
    paths = cfg.get("paths", {})
    if "validation_monitoring" not in paths:
        raise cfgmod.ConfigError("config needs paths.validation_monitoring")
    vsites, vobs = ingest_monitoring(paths["validation_monitoring"])
    outputs = ingest_grid_outputs(paths["grid_outputs"])
    validation = build_dataset(vsites, train.grid, vobs, outputs, spec.transform)
    block = cfg.get("sensitivity", {})
    fp = cfgmod.fit_params(cfg)
    rows = sensitivity_sweep(
        train,
        validation,
        spec,
        multipliers=tuple(block.get("multipliers", (0.01, 0.1, 1.0, 10.0, 100.0))),
        methods=tuple(block.get("methods", ("downscaler", "kriging"))),
        seed=cfg["seed"],
        n_iter=fp["n_iter"],
        burn_in=fp["burn_in"],
        thin=fp["thin"],
    )
    write_sweep_csv(rows, os.path.join(out_dir, "sweep.csv"), config_hash=chash)
    return 0


def cmd_baseline(args) -> int:
    cfg, out_dir, chash = _load(args)
    train, spec = _read_dataset(cfg)
    paths = cfg.get("paths", {})
    if "validation_monitoring" not in paths:
        raise cfgmod.ConfigError("config needs paths.validation_monitoring")
    vsites, vobs = ingest_monitoring(paths["validation_monitoring"])
    outputs = ingest_grid_outputs(paths["grid_outputs"])
    validation = build_dataset(vsites, train.grid, vobs, outputs, spec.transform)
    block = cfg.get("baseline", {})
    p = spec.p
    phi = tuple(
        block.get("phi", [spec.phi.phi[i * (p + 1)] for i in range(p)])
    )
    km = float(cfg.get("evaluate", {}).get("stratify_km", 40.0))
    report = ScoreReport()
    methods = block.get("methods", ["kriging"])
    if "kriging" in methods:
        report.extend(score_kriging(train, validation, phi, method="kriging", stratify_km=km))
    if "cokriging" in methods:
        ck = block.get("cokrige")
        if ck is None:
            raise cfgmod.ConfigError("baseline.cokrige block (a11, a41, phi1) required")
        report.extend(
            score_kriging(
                train, validation, phi, method="cokriging", stratify_km=km,
                cokrige_params={"a11": float(ck["a11"]), "a41": float(ck["a41"]),
                                "phi1": float(ck.get("phi1", phi[0]))},
            )
        )
    report.to_csv(os.path.join(out_dir, "baseline_scores.csv"), config_hash=chash)
    with open(os.path.join(out_dir, "baseline_scores.txt"), "w") as fh:
        fh.write(f"# config_hash: {chash}\n")
        fh.write(report.to_text())
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sensitivity": cmd_sensitivity,
    "baseline": cmd_baseline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="downscaler",
        description="Fuse point monitoring data with gridded model output "
        "(simulate | fit | predict | evaluate | sensitivity | baseline).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__)
        sp.add_argument(
            "--config",
            default=os.environ.get(cfgmod.ENV_PREFIX + "CONFIG"),
            required=cfgmod.ENV_PREFIX + "CONFIG" not in os.environ,
            help="path to the YAML run config (env: DOWNSCALER_CONFIG)",
        )
        sp.add_argument("--seed", type=int, default=None,
                        help="master seed override (env: DOWNSCALER_SEED)")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads for independent chains (env: DOWNSCALER_THREADS)")
        sp.add_argument("--out", default=None,
                        help="output directory override (env: DOWNSCALER_OUT)")
        sp.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        return _fail(exc, code=2)
    except DownscalerError as exc:
        return _fail(exc, code=1)


if __name__ == "__main__":
    sys.exit(main())
