"""Scenario configs: JSON files validated against a shipped schema.

Matrices are nested row lists whose entries are either real numbers or
``[re, im]`` pairs.  An operator schedule is either one matrix or a list
of ``{"t": start, "matrix": ...}`` segments.  The nominal model and the
ensemble members list only the fields in which they differ from the
true model.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .estimators import PriorEnsemble
from .linalg import DEFAULT_TOLERANCES, Tolerances
from .model import ModelError, ModelPair, OperatorSchedule, QuantumModel, validate
from .trajectory import SimConfig, SimulationError

DEFAULT_FAILURE_BUDGET = 0.01

# what each task needs besides the true model
_NEEDS = {
    "regret": "nominal_model",
    "divergence_lnlambda": "nominal_model",
    "divergence_integrand": "nominal_model",
    "bound_qre": "nominal_model",
    "lemma_check": "nominal_model",
    "mutual_info": "ensemble",
    "bayes_regret": "ensemble",
    "capacity": "ensemble",
    "bound_holevo": "ensemble",
}


class ConfigError(ValueError):
    """Config problems, each tied to a location in the document."""

    def __init__(self, errors: list[dict]):
        self.errors = errors
        super().__init__("; ".join(f"{e['path']}: {e['message']}" for e in errors))

    @classmethod
    def single(cls, path: str, message: str) -> "ConfigError":
        return cls([{"path": path, "message": message}])


def schema() -> dict:
    return json.loads(resources.files("qregret.schema").joinpath("scenario.schema.json").read_text())


def bundled_names() -> list[str]:
    root = resources.files("qregret.scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def read_config(source: str | Path) -> dict:
    """Load a config from a file path or a bundled scenario name."""
    path = Path(source)
    try:
        if path.suffix == ".json" or path.exists():
            text = path.read_text()
        elif str(source) in bundled_names():
            text = resources.files("qregret.scenarios").joinpath(f"{source}.json").read_text()
        else:
            raise ConfigError.single("$", f"no config file or bundled scenario named {source!r}")
    except OSError as exc:
        raise ConfigError.single("$", f"cannot read {source}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError.single("$", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError.single("$", "config must be a JSON object")
    return doc


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` overrides; keys are dotted paths, values JSON (bare strings allowed)."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError.single("--set", f"expected key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node: Any = doc
        try:
            for p in parts[:-1]:
                node = node[int(p)] if isinstance(node, list) else node.setdefault(p, {})
            if isinstance(node, list):
                node[int(parts[-1])] = value
            else:
                node[parts[-1]] = value
        except (ValueError, IndexError, TypeError, AttributeError):
            raise ConfigError.single(key, "override path does not exist") from None
    return doc


def _json_path(error: jsonschema.ValidationError) -> str:
    out = "$"
    for p in error.absolute_path:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def schema_errors(doc: dict) -> list[dict]:
    validator = jsonschema.Draft202012Validator(schema())
    errs = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    return [{"path": _json_path(e), "message": e.message} for e in errs]


def parse_matrix(value, dim: int | None = None, path: str = "$") -> np.ndarray:
    rows = [[complex(x[0], x[1]) if isinstance(x, list) else complex(x) for x in row] for row in value]
    n = len(rows)
    if any(len(r) != n for r in rows):
        raise ConfigError.single(path, "matrix must be square")
    if dim is not None and n != dim:
        raise ConfigError.single(path, f"matrix is {n}x{n}, expected {dim}x{dim}")
    return np.array(rows, dtype=complex)


def parse_schedule(value, dim: int, path: str) -> OperatorSchedule:
    if value and isinstance(value[0], dict):
        starts = [seg["t"] for seg in value]
        mats = [parse_matrix(seg["matrix"], dim, f"{path}[{i}].matrix") for i, seg in enumerate(value)]
        try:
            return OperatorSchedule(tuple(starts), tuple(mats))
        except ModelError as exc:
            raise ConfigError.single(path, str(exc)) from exc
    return OperatorSchedule.constant(parse_matrix(value, dim, path))


def _build_model(spec: dict, base: dict | None, kind: str, dim: int, path: str) -> QuantumModel:
    merged = dict(base or {})
    merged.update(spec)
    try:
        m = QuantumModel(
            parse_matrix(merged["rho0"], dim, f"{path}.rho0"),
            parse_schedule(merged["a"], dim, f"{path}.a"),
            kind,
            parse_schedule(merged["hamiltonian"], dim, f"{path}.hamiltonian") if "hamiltonian" in merged else None,
            tuple(parse_schedule(c, dim, f"{path}.dissipators[{i}]")
                  for i, c in enumerate(merged.get("dissipators", []))),
            merged.get("label", ""),
        )
    except ModelError as exc:
        raise ConfigError.single(path, str(exc)) from exc
    report = validate(m)
    if not report.ok:
        raise ConfigError([{"path": f"{path}.{'rho0' if 'hamiltonian' not in v.check else 'hamiltonian'}",
                            "message": v.message} for v in report.violations])
    return m


@dataclass
class Scenario:
    name: str
    doc: dict
    cfg: SimConfig
    true_model: QuantumModel
    tasks: list[str]
    pair: ModelPair | None = None
    ensemble: PriorEnsemble | None = None
    horizons: tuple[float, ...] | None = None
    options: dict = field(default_factory=dict)
    tolerances: Tolerances = DEFAULT_TOLERANCES
    failure_budget: float = DEFAULT_FAILURE_BUDGET


def build_scenario(doc: dict, workers: int = 1) -> Scenario:
    """Validate a config document and build the objects it describes."""
    errs = schema_errors(doc)
    if errs:
        raise ConfigError(errs)
    kind, dim = doc["kind"], doc["dim"]
    problems = []
    for task in doc["tasks"]:
        need = _NEEDS.get(task)
        if need and need not in doc:
            problems.append({"path": f"$.{need}", "message": f"task {task!r} needs {need}"})
    horizons = doc.get("horizons")
    if horizons and max(horizons) > doc["T"] * (1 + 1e-12):
        problems.append({"path": "$.horizons", "message": "horizons must not exceed T"})
    ens_doc = doc.get("ensemble")
    if ens_doc and "weights" in ens_doc:
        w = ens_doc["weights"]
        if len(w) != len(ens_doc["models"]):
            problems.append({"path": "$.ensemble.weights", "message": "need one weight per ensemble model"})
        elif abs(sum(w) - 1.0) > 1e-12:
            problems.append({"path": "$.ensemble.weights", "message": f"weights sum to {sum(w)!r}, not 1"})
    if problems:
        raise ConfigError(problems)

    try:
        cfg = SimConfig(doc["dt"], doc["T"], doc["n_traj"], doc.get("base_seed", 0),
                        doc.get("chunk_size", 2048), workers)
    except SimulationError as exc:
        raise ConfigError.single("$", str(exc)) from exc
    true_model = _build_model(doc["true_model"], None, kind, dim, "$.true_model")
    pair = None
    if "nominal_model" in doc:
        nominal = _build_model(doc["nominal_model"], doc["true_model"], kind, dim, "$.nominal_model")
        pair = ModelPair(true_model, nominal)
    ensemble = None
    if ens_doc:
        models = tuple(_build_model(spec, doc["true_model"], kind, dim, f"$.ensemble.models[{i}]")
                       for i, spec in enumerate(ens_doc["models"]))
        k = len(models)
        weights = np.array(ens_doc.get("weights", [1.0 / k] * k), dtype=float)
        labels = tuple(m.label or f"theta{i}" for i, m in enumerate(models))
        ensemble = PriorEnsemble(labels, models, weights)
    tol = DEFAULT_TOLERANCES.replace(**doc.get("tolerances", {}))
    return Scenario(doc["name"], doc, cfg, true_model, list(doc["tasks"]), pair, ensemble,
                    tuple(horizons) if horizons else None, dict(doc.get("options", {})), tol,
                    float(doc.get("failure_budget", DEFAULT_FAILURE_BUDGET)))


def load_scenario(source: str | Path, overrides: list[str] = (), workers: int = 1) -> Scenario:
    return build_scenario(apply_overrides(read_config(source), list(overrides)), workers)
