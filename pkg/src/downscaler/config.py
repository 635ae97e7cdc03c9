"""Run configuration: one YAML file, flag/env overrides, content hashing.

Precedence is flags > environment (DOWNSCALER_*) > config file. The config
hash (sha256 of the canonical JSON form, after overrides) is stamped into
every output file so artifacts can be traced to the exact configuration.
"""

from __future__ import annotations

import hashlib
import json
import os

import yaml

from .data import Grid, TransformSpec
from .errors import ConfigError
from .model import ModelSpec
from .simulator import GridFieldConfig, TruthConfig

ENV_PREFIX = "DOWNSCALER_"


def load_config(path) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        try:
            cfg = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    return cfg


def apply_overrides(cfg: dict, seed=None, threads=None, out=None) -> dict:
    cfg = dict(cfg)
    env_seed = os.environ.get(ENV_PREFIX + "SEED")
    env_threads = os.environ.get(ENV_PREFIX + "THREADS")
    env_out = os.environ.get(ENV_PREFIX + "OUT")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    if env_threads is not None:
        cfg["threads"] = int(env_threads)
    if env_out is not None:
        cfg["output_dir"] = env_out
    if seed is not None:
        cfg["seed"] = int(seed)
    if threads is not None:
        cfg["threads"] = int(threads)
    if out is not None:
        cfg["output_dir"] = str(out)
    cfg.setdefault("seed", 0)
    cfg.setdefault("threads", 1)
    cfg.setdefault("output_dir", "out")
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def spec_from_config(cfg: dict) -> ModelSpec:
    if "model" not in cfg:
        raise ConfigError("config needs a 'model' block")
    try:
        spec = ModelSpec.from_dict(cfg["model"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad model block: {exc}") from None
    from .model import validate_spec

    problems = validate_spec(spec)
    if problems:
        raise ConfigError("invalid model spec: " + "; ".join(problems))
    return spec


def grid_from_config(cfg: dict) -> Grid:
    if "grid" not in cfg:
        raise ConfigError("config needs a 'grid' block")
    try:
        return Grid.from_dict(cfg["grid"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad grid block: {exc}") from None


def truth_from_config(cfg: dict, spec: ModelSpec) -> TruthConfig:
    import numpy as np

    block = cfg.get("simulate", {}).get("truth")
    if block is None:
        raise ConfigError("config needs a 'simulate.truth' block")
    try:
        entries = {}
        for key, v in block["A_entries"].items():
            r, c = (int(x) for x in str(key).split(","))
            entries[(r, c)] = float(v)
        gf = block.get("grid_fields", {})
        grid = Grid.from_dict(cfg["grid"]) if "grid" in cfg else None
        return TruthConfig(
            spec=spec,
            A_entries=entries,
            tau2=np.asarray(block["tau2"], dtype=float),
            beta_overall=np.asarray(block["beta_overall"], dtype=float),
            n_days=int(block["n_days"]),
            n_both=int(block["n_both"]),
            n_only1=int(block.get("n_only1", 0)),
            n_only2=int(block.get("n_only2", 0)),
            pollutant2_period=int(block.get("pollutant2_period", 1)),
            n_daily_2=int(block.get("n_daily_2", 0)),
            grid=grid,
            grid_fields=GridFieldConfig(
                means=tuple(gf.get("means", (7.41, 2.72))),
                sds=tuple(gf.get("sds", (1.31, 0.56))),
                range_km=float(gf.get("range_km", 600.0)),
                cross_corr=float(gf.get("cross_corr", 0.7)),
            ),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad simulate.truth block: {exc}") from None


def fit_params(cfg: dict) -> dict:
    block = cfg.get("fit", {})
    return {
        "n_iter": int(block.get("n_iter", 20000)),
        "burn_in": int(block.get("burn_in", 10000)),
        "thin": int(block.get("thin", 10)),
        "n_chains": int(block.get("n_chains", 3)),
    }
