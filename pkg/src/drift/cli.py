"""Command line: generate, train, compare, sweep, gradcheck.

Exit codes: 0 success, 1 gradcheck failure, 2 usage or validation error.
Outputs default to ``$DRIFT_OUTPUT_ROOT`` (``runs`` if unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from drift import engine
from drift.data import inject_label_noise, make_blobs, make_two_moons, write_csv
from drift.engine import ConfigError, RunConfig, RunMetrics
from drift.strategy import StrategyConfig

log = logging.getLogger("drift")

OUTPUT_ROOT_ENV = "DRIFT_OUTPUT_ROOT"
DEFAULT_SEEDS = list(range(10))
SWEEP_PARAMS = ("alpha", "tau", "variant")


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _dump(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------- experiment spec files

def parse_override(text: str):
    """``a.b=value`` -> (["a", "b"], value); value is parsed as JSON when possible."""
    if "=" not in text:
        raise UsageError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_experiment(spec_path: Optional[str], overrides: Sequence[str] = ()):
    """Read an experiment spec (RunConfig fields plus ``seeds``) and apply overrides."""
    raw = _load_json(spec_path) if spec_path else {}
    if not isinstance(raw, dict):
        raise UsageError("experiment spec must be a JSON object")
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        path, value = parse_override(item)
        target = raw
        for part in path[:-1]:
            target = target.setdefault(part, {})
        target[path[-1]] = value
    seeds = raw.pop("seeds", DEFAULT_SEEDS)
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError(["seeds: must be a non-empty list of integers"])
    if len(set(seeds)) != len(seeds):
        raise ConfigError(["seeds: duplicate entries"])
    return RunConfig.from_dict(raw), seeds


def resolved_spec(cfg: RunConfig, seeds: Sequence[int]) -> dict:
    out = cfg.to_dict()
    out["seeds"] = list(seeds)
    return out


# ---------------------------------------------------------------- run bundles

def write_bundle(out_dir: Path, cfg: RunConfig, seeds: Sequence[int],
                 runs: Sequence[RunMetrics]) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump(resolved_spec(cfg, seeds), out_dir / "resolved_config.json")
    for run in runs:
        seed_dir = out_dir / f"seed_{run.seed}"
        seed_dir.mkdir(exist_ok=True)
        with open(seed_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for rec in run.records:
                fh.write(json.dumps(rec.__dict__, sort_keys=True) + "\n")
        run.final_params.save(seed_dir / "checkpoint.json")
        _dump(run.summary(), seed_dir / "summary.json")
    finals = np.array([r.final_accuracy for r in runs])
    summary = {
        "config": resolved_spec(cfg, seeds),
        "seeds": list(seeds),
        "final_accuracy": {str(r.seed): r.final_accuracy for r in runs},
        "mean": float(finals.mean()),
        "std": float(finals.std(ddof=1)) if finals.size > 1 else 0.0,
        "learning_curve": engine.learning_curve(runs),
    }
    _dump(summary, out_dir / "summary.json")
    return summary


def read_bundle(run_dir) -> dict:
    """Summary plus per-seed learning curves of a train output directory."""
    run_dir = Path(run_dir)
    if not (run_dir / "summary.json").is_file():
        raise UsageError(f"{run_dir}: not a run directory (summary.json missing)")
    summary = _load_json(run_dir / "summary.json")
    try:
        seeds = [int(s) for s in summary["seeds"]]
        finals = {int(k): float(v) for k, v in summary["final_accuracy"].items()}
    except (KeyError, TypeError, ValueError):
        raise UsageError(f"{run_dir}: malformed summary.json") from None
    curves = {}
    for seed in seeds:
        path = run_dir / f"seed_{seed}" / "metrics.jsonl"
        if not path.is_file():
            raise UsageError(f"{run_dir}: missing {path.name} for seed {seed}")
        with open(path, encoding="utf-8") as fh:
            curves[seed] = [json.loads(line) for line in fh if line.strip()]
    return {"summary": summary, "seeds": seeds, "finals": finals, "curves": curves}


def run_experiment(cfg: RunConfig, seeds: Sequence[int], out_dir: Path, jobs: int = 1) -> dict:
    log.info("training %s/%s on seeds %s -> %s", cfg.method, cfg.mode, list(seeds), out_dir)
    runs = engine.run_seeds(cfg, seeds, jobs)
    return write_bundle(out_dir, cfg, seeds, runs)


def compare_bundles(a: dict, b: dict) -> dict:
    missing_b = sorted(set(a["seeds"]) - set(b["seeds"]))
    missing_a = sorted(set(b["seeds"]) - set(a["seeds"]))
    if missing_a or missing_b:
        raise UsageError(f"seed mismatch: missing in first {missing_a}, missing in second {missing_b}")
    seeds = sorted(a["seeds"])
    fa = [a["finals"][s] for s in seeds]
    fb = [b["finals"][s] for s in seeds]
    stats = engine.compare_runs(fa, fb)
    steps = sorted(set.intersection(*(
        {rec["step"] for rec in bundle["curves"][s]} for bundle in (a, b) for s in seeds)))
    curve = []
    for step in steps:
        row = {"step": step}
        for tag, bundle in (("a", a), ("b", b)):
            accs = np.array([next(r["eval_accuracy"] for r in bundle["curves"][s] if r["step"] == step)
                             for s in seeds])
            row[f"mean_{tag}"] = float(accs.mean())
            row[f"std_{tag}"] = float(accs.std(ddof=1)) if accs.size > 1 else 0.0
        curve.append(row)
    return {
        "per_seed": [{"seed": s, "a": a["finals"][s], "b": b["finals"][s]} for s in seeds],
        **stats,
        "std_a_le_std_b": stats["std_a"] <= stats["std_b"],
        "learning_curve": curve,
    }


def parse_values(param: str, text: str) -> List:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError("empty value list")
    values = []
    for item in items:
        if param == "variant":
            if item not in engine.VARIANTS:
                raise UsageError(f"unknown variant {item!r}; choose from {engine.VARIANTS}")
            value = item
        else:
            try:
                value = float(item)
            except ValueError:
                raise UsageError(f"{param} value {item!r} is not a number") from None
            if param == "tau" and not value > 0:
                raise UsageError(f"tau must be positive, got {value}")
            if param == "alpha" and not 0.0 <= value <= 1.0:
                raise UsageError(f"alpha must lie in [0, 1], got {value}")
        if value in values:
            log.warning("duplicate %s value %s dropped", param, item)
            continue
        values.append(value)
    return values


def sweep_config(base: RunConfig, param: str, value) -> RunConfig:
    if param == "alpha":
        return base.replace(alpha=value)
    if param == "tau":
        return base.replace(strategy=StrategyConfig(**{**base.strategy.__dict__, "tau": value}))
    if param == "variant":
        return engine.apply_variant(base, value)
    raise UsageError(f"sweep parameter must be one of {SWEEP_PARAMS}")


def run_sweep(base: RunConfig, seeds: Sequence[int], param: str, values: Sequence,
              out_dir: Path, jobs: int = 1) -> dict:
    """One bundle per value under ``out_dir/<param>=<value>`` plus a consolidated table."""
    rows = []
    for value in values:
        cfg = sweep_config(base, param, value)
        summary = run_experiment(cfg, seeds, out_dir / f"{param}={value}", jobs)
        rows.append({"value": value, "mean": summary["mean"], "std": summary["std"],
                     "final_accuracy": summary["final_accuracy"]})
    table = {"param": param, "seeds": list(seeds), "base_config": resolved_spec(base, seeds),
             "rows": rows}
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump(table, out_dir / "sweep_summary.json")
    return table


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    if args.labeled < 1 or args.unlabeled < 1:
        raise UsageError("--labeled and --unlabeled must be at least 1")
    if args.noise < 0:
        raise UsageError("--noise must be non-negative")
    if args.generator == "two-moons":
        ds = make_two_moons(args.labeled, args.unlabeled, args.noise, args.seed)
    else:
        ds = make_blobs(args.labeled, args.unlabeled, seed=args.seed)
    if args.flip_rate > 0:
        ds = inject_label_noise(ds, args.flip_rate, engine.derive_seed(args.seed, "label-noise"))
    out = Path(args.output) if args.output else output_root() / f"{args.generator}_seed{args.seed}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out, args.label_column)
    print(f"wrote {ds.n} rows ({ds.labeled_indices.size} labeled) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, seeds = load_experiment(args.spec, args.override or [])
    if args.seeds:
        seeds = _parse_seeds(args.seeds)
    out = Path(args.output) if args.output else output_root() / (Path(args.spec).stem if args.spec else "default")
    summary = run_experiment(cfg, seeds, out, args.jobs)
    print(json.dumps({"output": str(out), "mean": summary["mean"], "std": summary["std"],
                      "final_accuracy": summary["final_accuracy"]}, indent=2))
    return 0


def cmd_compare(args) -> int:
    a, b = read_bundle(args.run_a), read_bundle(args.run_b)
    report = compare_bundles(a, b)
    report["run_a"], report["run_b"] = str(args.run_a), str(args.run_b)
    out = Path(args.output) if args.output else Path(args.run_a) / f"compare_{Path(args.run_b).name}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump(report, out)
    p = report["p_value"]
    print(f"a: {report['mean_a']:.4f} +- {report['std_a']:.4f}   "
          f"b: {report['mean_b']:.4f} +- {report['std_b']:.4f}")
    if report["degenerate"]:
        print(f"t = {report['t_statistic']}  p-value undefined ({report['note']})")
    else:
        print(f"t = {report['t_statistic']:.4f}  one-sided p = {p:.4g}")
    print(f"report: {out}")
    return 0


def cmd_sweep(args) -> int:
    values = parse_values(args.param, args.values)
    cfg, seeds = load_experiment(args.spec, args.override or [])
    if args.seeds:
        seeds = _parse_seeds(args.seeds)
    out = Path(args.output) if args.output else output_root() / f"sweep_{args.param}"
    table = run_sweep(cfg, seeds, args.param, values, out, args.jobs)
    print(f"{args.param:>12}  {'mean':>8}  {'std':>8}")
    for row in table["rows"]:
        print(f"{str(row['value']):>12}  {row['mean']:8.4f}  {row['std']:8.4f}")
    print(f"table: {out / 'sweep_summary.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    if not args.tolerance > 0:
        raise UsageError("--tolerance must be positive")
    if not 0.0 <= args.alpha <= 1.0:
        raise UsageError("--alpha must lie in [0, 1]")
    if args.batch_size < 1:
        raise UsageError("--batch-size must be at least 1")
    cfg = StrategyConfig(tau=args.tau)
    worst_fd = worst_rec = 0.0
    for i in range(args.instances):
        res = engine.gradcheck_instance(args.seed + i, args.batch_size, args.alpha, args.mode, cfg)
        worst_fd = max(worst_fd, res["fd_max_rel_error"])
        worst_rec = max(worst_rec, res["recompose_max_rel_error"])
        print(f"seed {res['seed']}: params={res['num_params']} "
              f"fd_rel_err={res['fd_max_rel_error']:.3e} "
              f"recompose_rel_err={res['recompose_max_rel_error']:.3e} "
              f"leader_norm={res['leader_norm']:.4e} interaction_norm={res['interaction_norm']:.4e}")
    ok = worst_fd <= args.tolerance and worst_rec <= args.tolerance
    print(f"{'PASS' if ok else 'FAIL'}: max fd error {worst_fd:.3e}, "
          f"max recomposition error {worst_rec:.3e}, tolerance {args.tolerance:g}")
    return 0 if ok else 1


def _parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drift", description="Differentiable self-training experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset as CSV + sidecar JSON")
    p.add_argument("generator", choices=["two-moons", "blobs"])
    p.add_argument("--labeled", type=int, default=12, help="labeled samples per class")
    p.add_argument("--unlabeled", type=int, default=500, help="unlabeled samples per class")
    p.add_argument("--noise", type=float, default=0.1, help="Gaussian noise std (two-moons)")
    p.add_argument("--flip-rate", type=float, default=0.0, help="label flip probability")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-column", default="label")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_generate)

    def add_run_args(p):
        p.add_argument("--spec", help="experiment spec JSON (RunConfig fields plus 'seeds')")
        p.add_argument("--override", nargs="+", metavar="KEY=VALUE",
                       help="e.g. alpha=1.0 method=conventional strategy.tau=0.5")
        p.add_argument("--seeds", help="comma-separated seeds, replaces the spec's list")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("-o", "--output")

    p = sub.add_parser("train", help="train one configuration over seeds")
    add_run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="paired comparison of two train outputs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="train once per parameter value")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated list")
    add_run_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="check the Stackelberg gradient on a random small model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--mode", choices=["semi", "weak"], default="semi")
    p.add_argument("--instances", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"drift: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print("drift: invalid configuration:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"drift: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
