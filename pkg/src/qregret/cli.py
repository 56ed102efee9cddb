"""Command-line front end: ``qregret run | validate | list-scenarios | seed-sweep``.

Exit codes: 0 success, 2 config error, 3 failure budget exceeded,
4 numerical or runtime error.  Errors are reported as one JSON object on
stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bounds import BoundError
from .estimators import EstimationError
from .filter import FilterError
from .linalg import LinalgError
from .model import ModelError
from .runner import execute
from .scenario import ConfigError, bundled_names, load_scenario, read_config
from .trajectory import SimulationError

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_RUNTIME = 0, 2, 3, 4
THREADS_ENV = "QREGRET_THREADS"
EXACT_RELATIVE_ERROR = 1e-12


def _report(kind: str, message: str, errors: list | None = None, **extra) -> None:
    doc = {"error": kind, "message": message}
    if errors is not None:
        doc["errors"] = errors
    doc.update(extra)
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def _threads(args) -> int:
    return args.threads if args.threads is not None else default_threads()


def _guarded(func):
    def wrapper(args) -> int:
        try:
            return func(args)
        except ConfigError as exc:
            _report("config", "config validation failed", exc.errors)
            return EXIT_CONFIG
        except (ModelError, BoundError) as exc:
            _report("config", str(exc), [{"path": "$", "message": str(exc)}])
            return EXIT_CONFIG
        except (SimulationError, FilterError, EstimationError, LinalgError) as exc:
            _report("numerical", str(exc))
            return EXIT_RUNTIME
    return wrapper


@_guarded
def cmd_run(args) -> int:
    sc = load_scenario(args.config, args.set, _threads(args))
    out = Path(args.out) if args.out else Path("runs") / sc.name
    result = execute(sc, out)
    for row in result.rows:
        flag = "" if row["satisfied"] is None else ("  ok" if row["satisfied"] else "  VIOLATED")
        se = row["std_error"]
        se_txt = "" if se is None else f" +- {se:.3g}"
        mean = row["mean"]
        mean_txt = "nan" if mean is None else f"{mean:.6g}"
        print(f"{row['task']:<32} T={row['horizon']:<6g} {mean_txt}{se_txt}{flag}")
    print(f"results written to {out}")
    if result.failure_fraction > sc.failure_budget:
        _report("failure_budget", "numerical failures exceed the configured budget",
                failures=result.failures, records=result.records, budget=sc.failure_budget)
        return EXIT_BUDGET
    return EXIT_OK


@_guarded
def cmd_validate(args) -> int:
    sc = load_scenario(args.config, args.set)
    print(f"{sc.name}: ok ({len(sc.tasks)} tasks)")
    return EXIT_OK


def cmd_list(args) -> int:
    for name in bundled_names():
        desc = read_config(name).get("description", "")
        print(f"{name:<28} {desc}")
    return EXIT_OK


def seed_sweep_summary(rows_by_seed: list[list[dict]]) -> list[dict]:
    """Spread of the means across seeds over the mean claimed standard error, per (task, horizon).

    Rows whose claimed standard error is zero up to rounding in every run
    are exact and skipped.
    """
    keyed: dict[tuple, list[dict]] = {}
    for rows in rows_by_seed:
        for r in rows:
            if r["std_error"] is None or r["mean"] is None:
                continue
            keyed.setdefault((r["task"], r["horizon"]), []).append(r)
    out = []
    for (task, horizon), rs in keyed.items():
        se = np.array([r["std_error"] for r in rs])
        means = np.array([r["mean"] for r in rs])
        if len(rs) < 2 or np.all(se <= EXACT_RELATIVE_ERROR * np.maximum(1.0, np.abs(means))):
            continue
        ratio = float(np.std(means, ddof=1) / np.mean(se))
        out.append({"task": task, "horizon": horizon, "seeds": len(rs), "mean_of_means": float(means.mean()),
                    "spread": float(np.std(means, ddof=1)), "mean_std_error": float(se.mean()),
                    "ratio": ratio})
    return out


@_guarded
def cmd_seed_sweep(args) -> int:
    base = load_scenario(args.config, args.set, _threads(args))
    first = base.cfg.base_seed
    rows_by_seed = []
    for k in range(args.seeds):
        sc = load_scenario(args.config, list(args.set) + [f"base_seed={first + k}"], _threads(args))
        rows_by_seed.append(execute(sc).rows)
    summary = seed_sweep_summary(rows_by_seed)
    out = Path(args.out) if args.out else Path("runs") / f"{base.name}_seed_sweep"
    out.mkdir(parents=True, exist_ok=True)
    (out / "seed_sweep.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    with open(out / "seed_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ("task", "horizon", "seeds", "mean_of_means", "spread", "mean_std_error", "ratio")
        w.writerow(cols)
        for s in summary:
            w.writerow([f"{s[c]:.17g}" if isinstance(s[c], float) else s[c] for c in cols])
    for s in summary:
        print(f"{s['task']:<32} T={s['horizon']:<6g} ratio={s['ratio']:.3f} over {s['seeds']} seeds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qregret", description="Regret and information estimates for "
                                "continuously monitored quantum systems.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, threads=True):
        sp.add_argument("config", help="config file or bundled scenario name")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field (dotted path, JSON value); repeatable")
        if threads:
            sp.add_argument("--threads", type=int, default=None,
                            help=f"worker processes (default ${THREADS_ENV} or 1)")

    r = sub.add_parser("run", help="run a scenario and write results.json / results.csv")
    common(r)
    r.add_argument("--out", help="output directory (default runs/<scenario>)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="validate a config without running it")
    common(v, threads=False)
    v.set_defaults(func=cmd_validate)

    ls = sub.add_parser("list-scenarios", help="list bundled scenarios")
    ls.set_defaults(func=cmd_list)

    s = sub.add_parser("seed-sweep", help="rerun over consecutive seeds and compare spread with stderr")
    common(s)
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--out", help="output directory (default runs/<scenario>_seed_sweep)")
    s.set_defaults(func=cmd_seed_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
