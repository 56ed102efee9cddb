"""Execute the tasks of a scenario and collect result rows."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import BoundError, BoundReport, holevo_information, relative_entropy_with_flag
from .estimators import (
    EstimateWithError,
    agree,
    capacity_search,
    combined_stderr,
    ensemble_statistics,
    lemma_check,
    mutual_information,
    bayes_regret,
    pair_statistics,
)
from .filter import Hygiene, run_filters, write_trace_csv
from .model import MeasurementKind
from .scenario import Scenario
from .trajectory import TrajectoryRecord, simulate_batch, write_records_csv

ROW_COLUMNS = ("scenario", "task", "horizon", "mean", "std_error", "n", "failures",
               "bound", "satisfied", "seed", "dt")
CSV_COLUMNS = ROW_COLUMNS + ("wall_time_s",)

LEMMA_SLOPE_WINDOW = (0.3, 1.2)
LEMMA_MIN_SHRINK = 2.5


@dataclass
class RunResult:
    scenario: str
    rows: list[dict] = field(default_factory=list)
    details: dict = field(default_factory=dict)
    hygiene: Hygiene = field(default_factory=Hygiene)
    wall_times: dict = field(default_factory=dict)
    failures: int = 0
    records: int = 0

    @property
    def failure_fraction(self) -> float:
        return self.failures / self.records if self.records else 0.0

    def row(self, task: str, horizon: float | None = None) -> dict:
        found = [r for r in self.rows if r["task"] == task and (horizon is None or r["horizon"] == horizon)]
        if not found:
            raise KeyError(task)
        return found[-1]

    def as_json(self) -> dict:
        return {"scenario": self.scenario, "rows": self.rows, "details": self.details,
                "hygiene": self.hygiene.as_dict(), "hygiene_ok": self.hygiene.ok(),
                "failures": self.failures, "records": self.records}


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, (np.floating, np.integer)):
        return _finite(x.item())
    if isinstance(x, np.ndarray):
        return [_finite(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    return x


class _Rows:
    def __init__(self, sc: Scenario, result: RunResult):
        self.sc, self.result = sc, result

    def add(self, task: str, horizon: float, est: EstimateWithError | None = None, *, mean=None,
            std_error=None, n=None, failures=None, bound=None, satisfied=None) -> dict:
        row = {
            "scenario": self.sc.name,
            "task": task,
            "horizon": float(horizon),
            "mean": est.mean if est is not None else mean,
            "std_error": est.std_error if est is not None else std_error,
            "n": est.n if est is not None else n,
            "failures": est.failures if est is not None else (failures or 0),
            "bound": bound,
            "satisfied": None if satisfied is None else bool(satisfied),
            "seed": self.sc.cfg.base_seed,
            "dt": self.sc.cfg.dt,
        }
        row = _finite(row)
        self.result.rows.append(row)
        return row


def _identity(rows: _Rows, task: str, horizon: float, a: EstimateWithError, b: EstimateWithError):
    """Row for a - b with its combined standard error; satisfied when within 3 of them.

    Estimates with failed records are lower bounds of a possibly infinite
    quantity, so the comparison is left unevaluated for them.
    """
    diff = a.mean - b.mean
    se = combined_stderr(a, b)
    if a.failures or b.failures or not np.isfinite(diff):
        ok = None
    else:
        ok = diff == 0.0 if se == 0.0 else agree(a, b)
    rows.add(task, horizon, mean=diff, std_error=se, n=min(a.n, b.n), failures=max(a.failures, b.failures),
             satisfied=ok)


def _pair_tasks(sc: Scenario, rows: _Rows, result: RunResult) -> None:
    wanted = {"regret", "divergence_lnlambda", "divergence_integrand", "bound_qre"} & set(sc.tasks)
    if not wanted:
        return
    t0 = time.perf_counter()
    stats = pair_statistics(sc.pair, sc.cfg, sc.horizons)
    result.hygiene = result.hygiene.merge(stats.hygiene)
    result.failures += stats.failures
    result.records += sc.cfg.n_traj
    poisson = sc.pair.kind is MeasurementKind.POISSONIAN
    bound = clamped = None
    if "bound_qre" in wanted:
        if not sc.pair.true_model.same_dynamics(sc.pair.nominal_model):
            raise BoundError("bound_qre needs models that differ only in their initial states")
        bound, clamped = relative_entropy_with_flag(sc.pair.true_model.rho0, sc.pair.nominal_model.rho0,
                                                    sc.tolerances)
        result.details["bound_qre"] = {"bound": bound, "clamped": clamped}
    for h, t in enumerate(stats.horizons):
        reg = stats.estimate("regret", h)
        div = stats.estimate("lnlambda", h)
        integ = stats.estimate("integrand", h)
        if "regret" in wanted:
            rows.add("regret", t, reg)
            if poisson:
                rows.add("regret_reduced", t, stats.estimate("regret_reduced", h))
        if "divergence_lnlambda" in wanted:
            rows.add("divergence_lnlambda", t, div)
        if "divergence_integrand" in wanted:
            rows.add("divergence_integrand", t, integ)
        if {"regret", "divergence_lnlambda"} <= wanted:
            _identity(rows, "regret_minus_divergence", t, reg, div)
        if {"divergence_lnlambda", "divergence_integrand"} <= wanted:
            _identity(rows, "divergence_routes_gap", t, div, integ)
        if "bound_qre" in wanted:
            rows.add("bound_qre", t, reg, bound=bound,
                     satisfied=BoundReport(bound, reg, clamped).satisfied)
    result.wall_times["pair"] = time.perf_counter() - t0


def _ensemble_tasks(sc: Scenario, rows: _Rows, result: RunResult) -> None:
    wanted = {"mutual_info", "bayes_regret", "bound_holevo"} & set(sc.tasks)
    ens, cfg = sc.ensemble, sc.cfg
    if wanted:
        t0 = time.perf_counter()
        table = ensemble_statistics(ens, cfg, horizons=sc.horizons)
        result.hygiene = result.hygiene.merge(table.hygiene)
        result.failures += table.failures
        result.records += cfg.n_traj * ens.size
        chi = None
        if "bound_holevo" in wanted:
            base = ens.models[0]
            if not all(base.same_dynamics(m) for m in ens.models[1:]):
                raise BoundError("bound_holevo needs models that differ only in their initial states")
            chi = holevo_information([(w, m.rho0) for w, m in zip(ens.weights, ens.models)], sc.tolerances)
            result.details["bound_holevo"] = {"bound": chi}
        for h, t in enumerate(table.horizons):
            mi = mutual_information(ens, cfg, table, h)
            br = bayes_regret(ens, cfg, table, h)
            if "mutual_info" in wanted:
                rows.add("mutual_info", t, mi)
            if "bayes_regret" in wanted:
                rows.add("bayes_regret", t, br)
            if {"mutual_info", "bayes_regret"} <= wanted:
                _identity(rows, "bayes_regret_minus_mutual_info", t, br, mi)
            if "bound_holevo" in wanted:
                rows.add("bound_holevo", t, mi, bound=chi, satisfied=BoundReport(chi, mi).satisfied)
        result.wall_times["ensemble"] = time.perf_counter() - t0
    if "capacity" in sc.tasks:
        t0 = time.perf_counter()
        opts = sc.options
        check_cfg = cfg.with_(dt=opts.get("capacity_check_dt", cfg.dt),
                              n_traj=opts.get("capacity_check_n_traj", cfg.n_traj))
        cap = capacity_search(ens, cfg, grid=opts.get("capacity_grid", 101), tol=opts.get("capacity_tol", 1e-6),
                              max_iter=opts.get("capacity_max_iter", 10_000), check_cfg=check_cfg)
        for table in (cap.table, cap.check_table):
            result.hygiene = result.hygiene.merge(table.hygiene)
            result.failures += table.failures
        result.records += (cfg.n_traj + check_cfg.n_traj) * ens.size
        rows.add("capacity", cfg.T, cap.c)
        rows.add("minimax_regret", cfg.T, cap.minimax, bound=cap.c.mean, satisfied=agree(cap.minimax, cap.c))
        result.details["capacity"] = _finite({
            "pi_star": cap.pi_star, "iterations": cap.iterations, "converged": cap.converged,
            "grid_argmax": cap.grid_argmax, "labels": list(ens.thetas)})
        result.wall_times["capacity"] = time.perf_counter() - t0


def _lemma_task(sc: Scenario, rows: _Rows, result: RunResult) -> None:
    t0 = time.perf_counter()
    n = sc.options.get("lemma_records", 100)
    lc = lemma_check(sc.pair, sc.cfg, n, sc.options.get("lemma_refinements", (1, 4, 16)))
    result.hygiene = result.hygiene.merge(lc.hygiene)
    lo, hi = LEMMA_SLOPE_WINDOW
    ok = lo <= lc.slope <= hi and lc.shrink >= LEMMA_MIN_SHRINK
    rows.add("lemma_check", sc.cfg.T, mean=lc.shrink, std_error=None, n=n - lc.excluded,
             failures=lc.failures, satisfied=ok)
    result.details["lemma_check"] = _finite({"dts": lc.dts, "worst_gaps": lc.worst_gaps, "slope": lc.slope,
                                             "shrink": lc.shrink, "excluded": lc.excluded})
    result.wall_times["lemma_check"] = time.perf_counter() - t0


def _outputs(sc: Scenario, out_dir: Path, result: RunResult) -> None:
    cfg = sc.cfg
    if "dump_records" in sc.tasks:
        n = min(sc.options.get("dump_records", 10), cfg.n_traj)
        inc, _ = simulate_batch(sc.true_model, cfg, list(range(n)))
        recs = [TrajectoryRecord(sc.true_model.kind, cfg.dt, inc[i], cfg.base_seed, i) for i in range(n)]
        write_records_csv(out_dir / "records.csv.gz", recs)
    if "traces" in sc.tasks:
        n = min(sc.options.get("trace_records", 1), cfg.n_traj)
        models = [sc.true_model] + ([sc.pair.nominal_model] if sc.pair else [])
        inc, _ = simulate_batch(sc.true_model, cfg, list(range(n)))
        (out_dir / "traces").mkdir(parents=True, exist_ok=True)
        for i in range(n):
            rec = TrajectoryRecord(sc.true_model.kind, cfg.dt, inc[i], cfg.base_seed, i)
            traces = run_filters(models, rec, result.hygiene)
            for tr, name in zip(traces, ("true", "nominal")):
                tr.label = f"{name}_{i}"
            write_trace_csv(out_dir / "traces" / f"record_{i:04d}.csv", traces)


def execute(sc: Scenario, out_dir: str | Path | None = None) -> RunResult:
    """Run every task of ``sc``; write results files when ``out_dir`` is given."""
    result = RunResult(sc.name)
    rows = _Rows(sc, result)
    t0 = time.perf_counter()
    if sc.pair is not None:
        _pair_tasks(sc, rows, result)
        if "lemma_check" in sc.tasks:
            _lemma_task(sc, rows, result)
    if sc.ensemble is not None:
        _ensemble_tasks(sc, rows, result)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _outputs(sc, out, result)
    result.wall_times["total"] = time.perf_counter() - t0
    if out_dir is not None:
        write_results(result, out, sc)
    return result


def results_json_text(result: RunResult, sc: Scenario) -> str:
    doc = result.as_json()
    doc["config"] = sc.doc
    return json.dumps(_finite(doc), sort_keys=True, indent=2) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_results(result: RunResult, out: Path, sc: Scenario) -> None:
    """results.json is a pure function of config and seed; timings go to the CSV and timing.json."""
    (out / "results.json").write_text(results_json_text(result, sc))
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        total = result.wall_times.get("total", 0.0)
        for row in result.rows:
            w.writerow([_fmt(row[c]) for c in ROW_COLUMNS] + [_fmt(total)])
    (out / "timing.json").write_text(json.dumps(result.wall_times, sort_keys=True, indent=2) + "\n")
