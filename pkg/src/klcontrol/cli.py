"""Command-line entry point: ``klcontrol --experiment NAME`` or ``klcontrol --selftest``."""

from __future__ import annotations

import argparse
import copy
import io
import json
import logging
import sys
import time

import jsonschema
import numpy as np

from .core import KLControlError
from .experiments import RUNNERS, ExperimentTable
from .rng import RngStream

CSV_VERSION = "klcontrol-csv v1"
DEFAULT_SEED = 20240601
U64_MAX = 2**64 - 1

log = logging.getLogger("klcontrol")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_count = {"type": "integer", "minimum": 1}
_u64 = {"type": "integer", "minimum": 0, "maximum": U64_MAX}

# keys every experiment accepts next to its own parameters
_COMMON = {
    "experiment": {"enum": sorted(RUNNERS)},
    "seed": _u64,
    "workers": _count,
    "out": {"type": "string"},
}

SCHEMAS = {
    "lq-value": {
        "A": _num, "B": _num, "Q": _pos, "Sigma": _pos, "horizon": _count,
        "x": {"type": "array", "items": _num, "minItems": 1},
        "samples": {"type": "array", "items": _count, "minItems": 1},
    },
    "lq-rollout": {
        "A": _num, "B": _num, "horizon": _count, "x0": _num, "paths": _count,
        "pairs": {"type": "array", "minItems": 1,
                  "items": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}},
    },
    "cartpole": {
        "params": {"type": "object", "additionalProperties": False,
                   "properties": {k: _pos for k in ("M", "m", "L", "g", "tau")}},
        "q": {"type": "array", "items": _num, "minItems": 4, "maxItems": 4},
        "sigma": _pos, "action_step": _pos, "action_count": {"type": "integer", "minimum": 0},
        "x0": {"type": "array", "items": _num, "minItems": 4, "maxItems": 4},
        "horizon": _count, "samples": _count, "rollouts": _count, "zero_cost": {"type": "boolean"},
    },
    "mdp-demo": {
        "transitions": {"type": "array", "minItems": 1, "items": {"type": "array", "items": {
            "anyOf": [_num, {"type": "array", "items": _num}]}}},
        "costs": {"type": "array", "minItems": 1, "items": {
            "anyOf": [_num, {"type": "array", "items": _num}]}},
        "horizon": _count,
    },
}


class ConfigError(ValueError):
    pass


def build_config(name: str, user: dict | None = None) -> dict:
    """Validate ``user`` against the experiment's schema and merge it over the defaults."""
    user = dict(user or {})
    if name not in RUNNERS:
        raise ConfigError(f"unknown experiment {name!r}")
    if user.get("experiment", name) != name:
        raise ConfigError(f"config is for {user['experiment']!r}, not {name!r}")
    schema = {
        "type": "object",
        "additionalProperties": False,
        "properties": {**_COMMON, **SCHEMAS[name]},
    }
    try:
        jsonschema.validate(user, schema)
    except jsonschema.ValidationError as err:
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {err.message}") from None
    cfg = copy.deepcopy(RUNNERS[name][1])
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    return cfg


def apply_samples(name: str, cfg: dict, samples: int) -> None:
    """Route ``--samples`` to the setting it means for each experiment."""
    if name == "lq-value":
        cfg["samples"] = [samples]
    elif name == "lq-rollout":
        cfg["paths"] = samples
    elif name == "cartpole":
        cfg["samples"] = samples
    else:
        log.warning("--samples has no effect on %s", name)


def _field(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def write_csv(table: ExperimentTable, name: str, seed: int, cfg: dict, out) -> None:
    out.write(f"# {CSV_VERSION}\n")
    out.write(f"# experiment: {name}\n")
    out.write(f"# seed: {seed}\n")
    params = {k: v for k, v in cfg.items() if k not in _COMMON}
    out.write(f"# config: {json.dumps(params, sort_keys=True, separators=(',', ':'))}\n")
    for line in table.metadata:
        out.write(f"# {line}\n")
    out.write(",".join(table.columns) + "\n")
    for row in table.rows:
        out.write(",".join(_field(v) for v in row) + "\n")


def _report_timings(name: str, table: ExperimentTable, total: float) -> None:
    if name == "lq-value":
        for x, S, t in table.timings:
            print(f"timing x={x:g} S={S}: {t:.4f} s", file=sys.stderr)
    elif name == "cartpole":
        for r, t in table.timings:
            print(f"timing rollout {r}: {t:.2f} s", file=sys.stderr)
    print(f"total: {total:.2f} s", file=sys.stderr)


def run_experiment(name: str, cfg: dict, seed: int, workers: int = 1) -> tuple[str, ExperimentTable]:
    """Run one experiment and return its CSV text and table."""
    fn = RUNNERS[name][0]
    table = fn(cfg, RngStream(seed), workers)
    buf = io.StringIO()
    write_csv(table, name, seed, cfg, buf)
    return buf.getvalue(), table


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="klcontrol", description="KL optimal control experiments")
    p.add_argument("--experiment", choices=sorted(RUNNERS))
    p.add_argument("--config", help="JSON file with an 'experiment' key and parameter overrides")
    p.add_argument("--seed", type=int, help=f"64-bit seed (default {DEFAULT_SEED})")
    p.add_argument("--samples", type=int, help="Monte-Carlo sample size (paths per pair for lq-rollout)")
    p.add_argument("--workers", type=int, help="worker threads; results do not depend on it")
    p.add_argument("--out", help="CSV destination (default stdout)")
    p.add_argument("--selftest", action="store_true", help="run the invariant checks and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.selftest:
        from .selftest import run_all

        return 0 if run_all() else 1

    user = {}
    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            print(f"error: cannot read config: {err}", file=sys.stderr)
            return 2
        if not isinstance(user, dict):
            print("error: config must be a JSON object", file=sys.stderr)
            return 2
    name = args.experiment or user.get("experiment")
    if name is None:
        print("error: give --experiment, a config with an 'experiment' key, or --selftest", file=sys.stderr)
        return 2
    try:
        cfg = build_config(name, user)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    seed = args.seed if args.seed is not None else cfg.get("seed", DEFAULT_SEED)
    workers = args.workers if args.workers is not None else cfg.get("workers", 1)
    out_path = args.out if args.out is not None else cfg.get("out")
    if not 0 <= seed <= U64_MAX:
        print("error: seed must be in [0, 2^64)", file=sys.stderr)
        return 2
    if workers < 1:
        print("error: workers must be positive", file=sys.stderr)
        return 2
    if args.samples is not None:
        if args.samples < 1:
            print("error: samples must be positive", file=sys.stderr)
            return 2
        apply_samples(name, cfg, args.samples)
    for key in _COMMON:
        cfg.pop(key, None)

    t0 = time.perf_counter()
    try:
        text, table = run_experiment(name, cfg, seed, workers)
    except (KLControlError, ValueError, ArithmeticError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    _report_timings(name, table, time.perf_counter() - t0)
    if out_path:
        with open(out_path, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
