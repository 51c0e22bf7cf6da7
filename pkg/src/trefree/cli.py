"""Command-line entry point: ``trefree {verify-bounds,train,grad-check,compare}``.

Exit codes: 0 success, 1 a property or run failed, 2 usage error.
Every command writes a ``report.json`` that validates against the matching
schema in ``trefree/schemas``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import verify
from .config import OBJECTIVE_NAMES, FLAT_KEYS, TrainConfig, load_config
from .envs import ENV_NAMES
from .gradcheck import LOSS_FAMILIES, run_gradcheck
from .trainer import TrainingAborted, TrainingLog, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULTS = TrainConfig()


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _clean(x):
    """Replace non-finite floats with None so the output is strict JSON."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def load_schema(name: str) -> dict:
    return json.loads(resources.files("trefree").joinpath("schemas", f"{name}.schema.json").read_text())


def write_report(report: dict, out_dir: Path, schema: str) -> Path:
    report = _clean(report)
    jsonschema.validate(report, load_schema(schema))
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=2))
    return path


# -- verify-bounds -------------------------------------------------------------------


def _sizes(text: str) -> tuple[int, int]:
    try:
        s, a = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MAX_STATES,MAX_ACTIONS, got {text!r}") from None
    if s < 1 or a < 1:
        raise argparse.ArgumentTypeError("sizes must be >= 1")
    return s, a


def cmd_verify_bounds(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if not 0.0 <= args.gamma < 1.0:
        raise UsageError(f"--gamma must lie in [0, 1), got {args.gamma}")
    max_s, max_a = args.sizes
    checks = list(verify.SUITES) if args.check == "all" else [args.check]
    suites = []
    for name in checks:
        kwargs = dict(seed=args.seed, gamma=args.gamma, max_states=max_s, max_actions=max_a)
        if name == "theorem2":
            kwargs.update(same_policy=args.same_policy, normalized=args.normalized)
        elif name == "theorem1":
            kwargs.update(same_policy=args.same_policy)
        result = verify.SUITES[name](args.count, **kwargs)
        print(f"{result.check}: {result.count - result.n_violations}/{result.count} hold, worst slack {result.worst_slack:.3e}")
        suites.append(result.to_dict())
    passed = all(s["passed"] for s in suites)
    report = {
        "command": "verify-bounds", "seed": args.seed, "gamma": args.gamma, "count": args.count,
        "max_states": max_s, "max_actions": max_a, "same_policy": args.same_policy,
        "normalized": args.normalized, "passed": passed, "suites": suites,
    }
    print(f"report: {write_report(report, Path(args.out_dir), 'verify_report')}")
    return EXIT_OK if passed else EXIT_FAIL


# -- train -----------------------------------------------------------------------------


def config_from_args(args) -> TrainConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        overrides[key] = value
    flag_map = {
        "env": "env_name", "objective": "objective", "delta": "delta", "eps_clip": "eps_clip",
        "lam": "lambda", "trpo_kl": "trpo_kl", "seed": "seed", "total_steps": "total_steps",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    try:
        return load_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from None


def summarize(log: TrainingLog) -> dict:
    lo, hi = log.column("min_log_ratio"), log.column("max_log_ratio")
    abs_ratio = np.maximum(np.abs(lo), np.abs(hi)) if len(log.rows) else np.array([])
    terms = log.column("max_term") if log.rows else np.array([])
    return {
        "iterations": len(log.rows),
        "steps": int(log.rows[-1]["step"]) if log.rows else 0,
        "final_return": log.final_return() if log.rows else None,
        "min_log_ratio": float(np.nanmin(lo)) if lo.size else None,
        "max_log_ratio": float(np.nanmax(hi)) if hi.size else None,
        "max_abs_log_ratio": float(np.nanmax(abs_ratio)) if abs_ratio.size else None,
        "max_term": float(np.nanmax(terms)) if np.any(np.isfinite(terms)) else None,
    }


def run_training(config: TrainConfig) -> tuple[TrainingLog, bool]:
    try:
        return train(config), True
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.log, False


def cmd_train(args) -> int:
    config = config_from_args(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log, ok = run_training(config)
    metrics, manifest = out / "metrics.csv", out / "manifest.json"
    log.write_csv(metrics)
    log.write_manifest(manifest)
    summary = summarize(log)
    report = {
        "command": "train", "objective": config.objective.name, "env": config.env_name,
        "seed": config.seed, "aborted": log.aborted,
        "artifacts": {"metrics": str(metrics), "manifest": str(manifest)},
        **{k: summary[k] for k in ("iterations", "steps", "final_return", "max_abs_log_ratio", "max_term")},
    }
    path = write_report(report, out, "train_report")
    for p in (metrics, manifest, path):
        print(p)
    return EXIT_OK if ok else EXIT_FAIL


# -- grad-check --------------------------------------------------------------------------


def cmd_grad_check(args) -> int:
    if args.n_nets < 1:
        raise UsageError("--n-nets must be >= 1")
    results = run_gradcheck(args.seed, n_nets=args.n_nets, families=tuple(args.families))
    rows = []
    for fam in args.families:
        rs = [r for r in results if r.family == fam]
        row = {
            "family": fam,
            "max_rel_err": max(r.max_rel_err for r in rs),
            "max_abs_err_small": max(r.max_abs_err_small for r in rs),
            "n_checked": sum(r.n_checked for r in rs),
            "n_flat_samples": sum(r.n_flat_samples for r in rs),
            "flat_exact_zero": all(r.flat_exact_zero for r in rs),
            "passed": all(r.passed for r in rs),
        }
        print(f"{fam:>10}: max rel err {row['max_rel_err']:.2e}  {'ok' if row['passed'] else 'FAIL'}")
        rows.append(row)
    passed = all(r["passed"] for r in rows)
    report = {"command": "grad-check", "seed": args.seed, "n_nets": args.n_nets, "passed": passed, "results": rows}
    print(f"report: {write_report(report, Path(args.out_dir), 'gradcheck_report')}")
    return EXIT_OK if passed else EXIT_FAIL


# -- compare ---------------------------------------------------------------------------------

COMPARE_COLUMNS = (
    "objective", "final_return_mean", "final_return_std", "min_log_ratio", "max_log_ratio", "max_abs_log_ratio",
)


def compare_row(name: str, summaries: list[dict]) -> dict:
    finals = np.array([s["final_return"] if s["final_return"] is not None else np.nan for s in summaries])

    def pick(key, fn):
        vals = [s[key] for s in summaries if s[key] is not None]
        return fn(vals) if vals else None

    return {
        "objective": name,
        "final_return_mean": float(np.mean(finals)),
        "final_return_std": float(np.std(finals)),
        "min_log_ratio": pick("min_log_ratio", min),
        "max_log_ratio": pick("max_log_ratio", max),
        "max_abs_log_ratio": pick("max_abs_log_ratio", max),
        "per_seed_max_abs_log_ratio": [s["max_abs_log_ratio"] for s in summaries],
    }


def cmd_compare(args) -> int:
    if len(args.objectives) < 2:
        raise UsageError("compare needs at least 2 objectives")
    args.objective = None
    base = config_from_args(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, aborted = [], []
    for name in args.objectives:
        objective = replace(base.objective, **dict(zip(("kind", "ppo_form"), OBJECTIVE_NAMES[name])))
        summaries = []
        for seed in args.seeds:
            log, ok = run_training(replace(base, objective=objective, seed=seed))
            if not ok:
                aborted.append(f"{name} seed {seed}: {log.aborted}")
            log.write_csv(out / f"metrics_{name}_seed{seed}.csv")
            summaries.append(summarize(log))
        rows.append(compare_row(name, summaries))
    table = out / "compare.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(_clean(rows))
    with open(table) as fh:
        sys.stdout.write(fh.read())
    report = {"command": "compare", "env": base.env_name, "seeds": list(args.seeds), "rows": rows, "aborted": aborted}
    print(f"report: {write_report(report, out, 'compare_report')}")
    return EXIT_FAIL if aborted else EXIT_OK


# -- parser --------------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser, objective: bool = True) -> None:
    obj = DEFAULTS.objective
    p.add_argument("--config", help="flat key=value config file; flags override it (default: none)")
    p.add_argument("--env", choices=ENV_NAMES, help=f"environment (default: {DEFAULTS.env_name})")
    if objective:
        p.add_argument("--objective", choices=sorted(OBJECTIVE_NAMES), help=f"objective (default: {obj.name})")
    p.add_argument("--delta", type=float, help=f"TREFree margin (default: {obj.delta})")
    p.add_argument("--eps-clip", type=float, help=f"PPO clip range (default: {obj.eps_clip})")
    p.add_argument("--lambda", dest="lam", type=float, help=f"ratio-cons clip (default: {obj.lam})")
    p.add_argument("--trpo-kl", type=float, help=f"TRPO KL limit (default: {obj.trpo_kl})")
    p.add_argument("--total-steps", type=int, help=f"environment steps (default: {DEFAULTS.total_steps})")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help=f"any other config key, repeatable; keys: {', '.join(sorted(FLAT_KEYS))}",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="trefree", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("verify-bounds", help="randomized exact checks of the improvement bounds")
    p.add_argument("--count", type=int, default=1000, help="instances per check (default: 1000)")
    p.add_argument("--seed", type=int, default=0, help="root seed (default: 0)")
    p.add_argument("--gamma", type=float, default=0.9, help="discount (default: 0.9)")
    p.add_argument("--sizes", type=_sizes, default=(5, 3), help="MAX_STATES,MAX_ACTIONS (default: 5,3)")
    p.add_argument("--check", choices=("all", *verify.SUITES), default="all", help="which check (default: all)")
    p.add_argument("--same-policy", action="store_true", help="force the new policy to equal the old (default: off)")
    p.add_argument("--normalized", action="store_true", help="(1-gamma)-scaled state weights in G (default: off)")
    p.add_argument("--out-dir", default="out", help="report directory (default: out)")
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("train", help="train one policy")
    _add_train_flags(p)
    p.add_argument("--seed", type=int, help=f"root seed (default: {DEFAULTS.seed})")
    p.add_argument("--out-dir", default="out", help="artifact directory (default: out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grad-check", help="finite-difference check of every loss gradient")
    p.add_argument("--seed", type=int, default=0, help="root seed (default: 0)")
    p.add_argument("--n-nets", type=int, default=10, help="random networks (default: 10)")
    p.add_argument("--families", nargs="+", choices=LOSS_FAMILIES, default=list(LOSS_FAMILIES),
                   help="loss families (default: all)")
    p.add_argument("--out-dir", default="out", help="report directory (default: out)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("compare", help="train several objectives on shared seeds")
    p.add_argument("--objectives", nargs="+", choices=sorted(OBJECTIVE_NAMES), default=["trefree", "ppo"],
                   help="objectives, at least 2 (default: trefree ppo)")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2], help="seeds (default: 0 1 2)")
    _add_train_flags(p, objective=False)
    p.add_argument("--out-dir", default="out", help="artifact directory (default: out)")
    p.set_defaults(func=cmd_compare, seed=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return args.func(args)
    except UsageError as exc:
        print(f"trefree: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
