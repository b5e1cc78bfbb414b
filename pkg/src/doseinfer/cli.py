"""Command-line entry point: ``doseinfer test|bands|simulate --config run.json``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
Every output embeds the hash of the effective configuration and the seed;
reruns with the same configuration produce byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bands import BandConfig, InfeasibleBandError, build_band
from .data import DataError, load_csv
from .estimators import DegenerateThresholdError, TmlConvergenceError
from .nuisance import NuisanceError
from .qcqp import QcqpError
from .simulation import METHODS, McSpec, run_mc
from .sup_test import TestConfig, run_test

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (QcqpError, InfeasibleBandError, TmlConvergenceError, DegenerateThresholdError, NuisanceError,
                  np.linalg.LinAlgError, ArithmeticError)

TEST_KEYS = {"estimator", "kappa", "D", "margin", "M", "seed", "alpha", "null_coef", "null_intercept", "folds",
             "grid_size", "g_floor", "bandwidths", "bandwidth_method", "tml_eps", "tml_max_steps"}
BAND_KEYS = {"alpha", "estimator", "kappa", "nu", "D", "margin", "M", "seed", "grid_size", "folds",
             "density_grid_size", "g_floor", "bandwidths", "bandwidth_method", "tml_eps", "tml_max_steps",
             "audit_exact"}
IO_KEYS = {"input", "covariates", "exposure", "outcome", "output", "dump_bootstrap"}
SIM_KEYS = {"setting", "n_list", "reps", "methods", "M", "D", "margin", "oracle_kappa", "bands", "alpha", "seed",
            "output"}


class ConfigError(ValueError):
    pass


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k != "output"}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    for key in ("seed", "output", "input"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if "seed" not in cfg:
        raise ConfigError("seed is required (config field or --seed)")
    return cfg


def _check_keys(cfg: dict, allowed: set[str]) -> None:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")


def _load_data(cfg: dict):
    for key in ("input", "exposure", "outcome"):
        if key not in cfg:
            raise ConfigError(f"missing required field {key!r}")
    return load_csv(cfg["input"], cfg.get("covariates", []), cfg["exposure"], cfg["outcome"])


def _output_path(cfg: dict, default: str) -> Path:
    return Path(cfg.get("output", default))


def cmd_test(cfg: dict) -> int:
    _check_keys(cfg, TEST_KEYS | IO_KEYS)
    data = _load_data(cfg)
    tc = TestConfig(**{k: v for k, v in cfg.items() if k in TEST_KEYS})
    tc.validate()
    result = run_test(data, tc)
    out = result.to_dict(include_bootstrap=bool(cfg.get("dump_bootstrap", False)))
    out["config_hash"] = config_hash(cfg)
    path = _output_path(cfg, "test_result.json")
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"psi_stat={result.psi_stat:.6g} p_value={result.p_value:.4f} -> {path}", file=sys.stderr)
    return EXIT_OK


def cmd_bands(cfg: dict) -> int:
    _check_keys(cfg, BAND_KEYS | IO_KEYS)
    data = _load_data(cfg)
    bc = BandConfig(**{k: v for k, v in cfg.items() if k in BAND_KEYS})
    bc.validate()
    band = build_band(data, bc)
    h = config_hash(cfg)
    stem = _output_path(cfg, "band")
    stem = stem.with_suffix("") if stem.suffix in (".csv", ".json") else stem
    band.write_csv(stem.with_suffix(".csv"), header_comment=f"config_hash={h} seed={band.seed}")
    out = band.to_dict()
    out["config_hash"] = h
    stem.with_suffix(".json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"band with {band.a.size} points -> {stem}.csv/.json", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(cfg: dict, threads: int = 1) -> int:
    _check_keys(cfg, SIM_KEYS)
    if "setting" not in cfg:
        raise ConfigError("missing required field 'setting'")
    setting = cfg["setting"]
    if setting not in (1, 2):
        raise ConfigError(f"unknown setting {setting!r}; expected 1 or 2")
    methods = tuple(cfg.get("methods", METHODS))
    spec = McSpec(setting=setting, methods=methods, M=cfg.get("M", 1000), D=cfg.get("D", 20),
                  margin=cfg.get("margin", 0.15), oracle_kappa=cfg.get("oracle_kappa"),
                  bands=bool(cfg.get("bands", False)), alpha=cfg.get("alpha", 0.05))
    n_list = [int(n) for n in cfg.get("n_list", [100, 200, 300, 400, 500])]
    if any(n < 10 for n in n_list):
        raise ConfigError("every n must be at least 10")
    reps = int(cfg.get("reps", 500))
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    report = run_mc(setting, methods, n_list, reps, int(cfg["seed"]), spec=spec, threads=threads)
    h = config_hash(cfg)
    stem = _output_path(cfg, "mc_report")
    stem = stem.with_suffix("") if stem.suffix in (".csv", ".json") else stem
    report.write_csv(stem.with_suffix(".csv"), header_comment=f"config_hash={h} seed={report.seed}")
    out = json.loads(report.to_json(include_timing=False))
    out["config_hash"] = h
    stem.with_suffix(".json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{len(report.records)} records in {report.elapsed:.1f}s -> {stem}.csv/.json", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doseinfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("test", "test a candidate dose-response curve"),
                        ("bands", "simultaneous confidence band for the centered curve"),
                        ("simulate", "Monte Carlo study on the synthetic settings")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--output", help="output file or stem")
        p.add_argument("--threads", type=int, default=1, help="worker processes for parallel maps")
        if name != "simulate":
            p.add_argument("--input", help="input CSV (overrides the config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = load_config(args)
        if args.command == "test":
            code = cmd_test(cfg)
        elif args.command == "bands":
            code = cmd_bands(cfg)
        else:
            code = cmd_simulate(cfg, max(1, args.threads))
    except NUMERIC_ERRORS as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.getLogger(__name__).info("finished in %.2fs", time.perf_counter() - t0)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
