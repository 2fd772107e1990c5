"""
Command implementations behind main.py and the report/truth file formats.

The fit report is written as JSON (``schema_version`` 1) and as a plain-text summary laid
out as a header block, then one table per level with
S1, S0 and the effect, each followed by its (LCL, UCL) when jackknife inference is on.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .aipwcc import LEVELS, SCALES, EstimandReport, PropensitySpec
from .data_model import DatasetSchema, ModelFormula, SurvivalDataset, load_csv, save_csv
from .errors import ConfigError, ReportSchemaError
from .inference import jackknife_estimates
from .nonparam import SurvivalCurve
from .simlab import (
    PRESETS,
    ScenarioSpec,
    TruthTable,
    censoring_rate_probe,
    generate,
    load_scenario,
    mc_truth,
    run_study,
    scenario,
)
from .strategies import EstimatorPipeline, Strategy

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
COMMANDS = ("fit", "simulate", "truth", "evaluate", "probe")
METHODS = ("marginal", "frailty", "km", "outcome_regression", "weighted_km")
OR_BACKENDS = ("marginal", "frailty")
ESTIMANDS = ("SPCE", "RMST")
VARIANCES = ("none", "jackknife")
REPORT_KEYS = ("schema_version", "header", "estimates", "diagnostics")
ESTIMATE_COLUMNS = ("level", "quantity", "time", "estimate")
DEFAULT_QUANTILES = (0.25, 0.5, 0.75)
RESULTS_DIR = Path("results")


@dataclass(frozen=True)
class RunConfig:
    command: str
    dataset: Path | None = None
    outcome_formula: str | None = None
    censoring_formula: str | None = None
    method: str = "marginal"
    or_backend: str = "marginal"
    estimand: str = "SPCE"
    taus: tuple[float, ...] = ()
    report_times: tuple[float, ...] = ()
    pi: float = 0.5
    variance: str = "none"
    alpha: float = 0.05
    scale: str = "difference"
    seed: int = 2025
    threads: int = 1
    output: Path | None = None
    curves: Path | None = None
    cluster_col: str = "cluster_id"
    time_col: str = "time"
    event_col: str = "event"
    arm_col: str = "arm"
    cluster_covariates: tuple[str, ...] = ()
    scenario: str = "1"
    n_clusters: int | None = None
    n_reps: int = 100
    n_truth_clusters: int = 100_000
    truth: Path | None = None
    strategies: tuple[str, ...] = ("marginal-o1c1",)

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"Unknown command '{self.command}'; choose from {COMMANDS}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got '{self.method}'")
        if self.or_backend not in OR_BACKENDS:
            raise ConfigError(f"or_backend must be one of {OR_BACKENDS}, got '{self.or_backend}'")
        if self.estimand not in ESTIMANDS:
            raise ConfigError(f"estimand must be one of {ESTIMANDS}, got '{self.estimand}'")
        if self.variance not in VARIANCES:
            raise ConfigError(f"variance must be one of {VARIANCES}, got '{self.variance}'")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got '{self.scale}'")
        if self.command in ("fit", "evaluate"):
            if self.estimand == "RMST" and not self.taus:
                raise ConfigError("--tau is required when estimand is RMST")
            if self.estimand == "SPCE" and self.taus:
                raise ConfigError("--tau only applies to estimand RMST")
        if self.command == "fit" and self.dataset is None:
            raise ConfigError("fit needs --data")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.threads == 0:
            raise ConfigError("threads must be a positive count or -1 for all cores")
        if self.n_reps < 1:
            raise ConfigError(f"n_reps must be positive, got {self.n_reps}")
        PropensitySpec(self.pi)
        return self

    @property
    def schema(self) -> DatasetSchema | None:
        """Column mapping from the flags; None when all are defaults, so a saved sidecar applies."""
        schema = DatasetSchema(
            cluster=self.cluster_col,
            time=self.time_col,
            event=self.event_col,
            arm=self.arm_col,
            cluster_covariates=self.cluster_covariates,
        )
        return None if schema == DatasetSchema() else schema

    def scenario_spec(self) -> ScenarioSpec:
        """Preset name or path to a YAML scenario file."""
        if self.scenario in PRESETS:
            spec = scenario(self.scenario)
        else:
            spec = load_scenario(self.scenario)
        if self.n_clusters is not None:
            spec = replace(spec, n_clusters=self.n_clusters)
        return spec


def default_report_times(dataset: SurvivalDataset) -> tuple[float, ...]:
    """25%, 50% and 75% quantiles of the observed times."""
    return tuple(float(q) for q in np.quantile(dataset.time, DEFAULT_QUANTILES))


def build_strategy(config: RunConfig, dataset: SurvivalDataset) -> Strategy:
    """
    Map --method to a strategy.

    ``marginal``, ``frailty`` and ``km`` are AIPWCC with that nuisance family (``km`` uses
    covariate-free Kaplan-Meier fits). ``outcome_regression`` standardizes the outcome model of
    ``or_backend``. ``weighted_km`` is the Kaplan-Meier comparator, weighted by inverse cluster
    size at the cluster level.
    """
    if config.outcome_formula:
        outcome = ModelFormula.parse(config.outcome_formula, "outcome")
    else:
        outcome = ModelFormula(tuple(dataset.covariate_names), "outcome")
    censoring = ModelFormula.parse(config.censoring_formula, "censoring") if config.censoring_formula else outcome.with_role("censoring")
    if config.method == "outcome_regression":
        return Strategy(f"{config.or_backend}-OR", "outcome_regression", config.or_backend, outcome)
    if config.method == "weighted_km":
        return Strategy("KM", "km", "km")
    return Strategy(config.method, "aipwcc", config.method, outcome, censoring)


def build_pipeline(config: RunConfig, dataset: SurvivalDataset) -> EstimatorPipeline:
    report_times = config.report_times
    if config.estimand == "SPCE" and not report_times:
        report_times = default_report_times(dataset)
    if config.estimand == "RMST":
        report_times = ()
    return EstimatorPipeline(
        build_strategy(config, dataset),
        PropensitySpec(config.pi),
        tuple(float(t) for t in report_times),
        tuple(float(t) for t in config.taus),
        scale=config.scale,
    )


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def report_to_dict(report: EstimandReport) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "header": _jsonable(report.header),
        "scale": report.scale,
        "estimates": _jsonable(report.estimates.to_dict(orient="records")),
        "diagnostics": _jsonable(report.diagnostics),
    }


def write_report(report: EstimandReport, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_to_dict(report), indent=2), encoding="utf-8")
    return path


def read_report(path: Path | str) -> EstimandReport:
    """Load a report written by write_report; curves are not stored and come back empty."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing report file: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportSchemaError(f"{path} is not valid JSON: {exc}") from exc
    return report_from_dict(payload)


def report_from_dict(payload: dict) -> EstimandReport:
    missing = [k for k in REPORT_KEYS if k not in payload]
    if missing:
        raise ReportSchemaError(f"Report is missing keys {missing}")
    if payload["schema_version"] != SCHEMA_VERSION:
        raise ReportSchemaError(
            f"Unsupported report schema_version {payload['schema_version']} (expected {SCHEMA_VERSION})"
        )
    estimates = pd.DataFrame(payload["estimates"])
    absent = [c for c in ESTIMATE_COLUMNS if c not in estimates.columns]
    if absent:
        raise ReportSchemaError(f"Report estimates lack columns {absent}")
    return EstimandReport(
        estimates, {}, payload.get("scale", "difference"), dict(payload["header"]), dict(payload["diagnostics"])
    )


def write_curves(report: EstimandReport, path: Path | str) -> Path:
    """Long-format CSV of every (level, arm) curve on the shared grid."""
    frames = [
        pd.DataFrame({"level": level, "arm": arm, "time": curve.grid, "survival": curve.values})
        for (level, arm), curve in report.curves.items()
        if isinstance(curve, SurvivalCurve)
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)
    return path


def _cell(row: pd.Series, digits: int) -> str:
    text = f"{row['estimate']:.{digits}g}"
    if "lower" in row and pd.notna(row.get("lower")):
        text += f" ({row['lower']:.{digits}g}, {row['upper']:.{digits}g})"
    return text


def format_report(report: EstimandReport, digits: int = 3) -> str:
    """Plain-text summary: header block, then one table per level."""
    h = report.header
    estimand = "RMST" if report.estimates["quantity"].str.startswith("RMST").any() else "SPCE"
    pi1 = float(h.get("pi", 0.5))
    lines = [
        f"crtsurv fit: method = {h.get('method')}, estimand = {estimand}",
        f"Treatment probs (p0, p1): {1 - pi1:g}, {pi1:g}",
        f"Outcome model:   {h.get('outcome_formula')}",
    ]
    if h.get("censoring_formula"):
        lines.append(f"Censoring model: {h.get('censoring_formula')}")
    lines += [f"Clusters (M):    {h.get('M')}", f"Obs (N):         {h.get('N')}"]
    effect = "S1-S0" if report.scale == "difference" else "S1/S0"
    names = {"SPCE": ("S1", "S0", "SPCE"), "RMST": ("RMST1", "RMST0", "RMST")}[estimand]
    labels = (names[0], names[1], effect if estimand == "SPCE" else effect.replace("S", "RMST"))
    for level in LEVELS:
        block = report.estimates[report.estimates["level"] == level]
        if block.empty:
            continue
        lines += ["", f"{level.capitalize()}-level {estimand}:"]
        rows = []
        for time in sorted(block["time"].unique()):
            at = block[np.isclose(block["time"], time)].set_index("quantity")
            if names[2] not in at.index:
                continue
            rows.append([f"t={time:.{digits}g}"] + [_cell(at.loc[q], digits) for q in names])
        suffix = " (LCL, UCL)" if report.has_inference else ""
        table = pd.DataFrame(rows, columns=[""] + [f"{label}{suffix}" for label in labels])
        lines.append(table.to_string(index=False))
        if report.has_inference:
            lines.append(f"  t-intervals with df = {h.get('df')}, alpha = {float(h.get('alpha', 0.05)):.3f}")
    return "\n".join(lines)


def cmd_fit(config: RunConfig) -> EstimandReport:
    config.validate()
    dataset = load_csv(config.dataset, config.schema)
    pipeline = build_pipeline(config, dataset)
    logger.info("Fitting %s on %d clusters / %d participants", pipeline.strategy.name, dataset.n_clusters, dataset.n_subjects)
    if config.variance == "jackknife":
        report = jackknife_estimates(dataset, pipeline, alpha=config.alpha, n_jobs=config.threads)
    else:
        report = pipeline(dataset)
    print(format_report(report))
    if config.output:
        path = write_report(report, config.output)
        print(f"Saved report to {path}")
    if config.curves:
        path = write_curves(report, config.curves)
        print(f"Saved curves to {path}")
    return report


def cmd_simulate(config: RunConfig) -> Path:
    config.validate()
    spec = config.scenario_spec()
    dataset = generate(spec, config.seed)
    path = save_csv(dataset, config.output or RESULTS_DIR / f"scenario_{spec.name}_seed{config.seed}.csv")
    info = dataset.describe()
    print(f"Scenario {spec.name}: M={info['M']}, N={info['N']}, censoring rate {info['censoring_rate']:.3f}")
    print(f"Saved dataset to {path}")
    return path


def truth_to_dict(truth: TruthTable, spec: ScenarioSpec) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario": spec.to_dict(),
        "n_clusters": truth.n_clusters,
        "seed": truth.seed,
        "targets": _jsonable(truth.targets.to_dict(orient="records")),
    }


def read_truth(path: Path | str) -> TruthTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing truth file: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    missing = [k for k in ("schema_version", "targets", "n_clusters", "seed") if k not in payload]
    if missing or payload["schema_version"] != SCHEMA_VERSION:
        raise ReportSchemaError(f"{path} is not a version-{SCHEMA_VERSION} truth file (missing {missing})")
    return TruthTable(pd.DataFrame(), pd.DataFrame(payload["targets"]), payload["n_clusters"], payload["seed"])


def _study_times(config: RunConfig) -> tuple[tuple[float, ...], tuple[float, ...]]:
    if config.estimand == "RMST":
        return (), config.taus
    return config.report_times or (1.0,), ()


def cmd_truth(config: RunConfig) -> TruthTable:
    config.validate()
    spec = config.scenario_spec()
    report_times, taus = _study_times(config)
    truth = mc_truth(spec, config.n_truth_clusters, report_times, taus, seed=config.seed)
    print(truth.targets.to_string(index=False, float_format=lambda v: f"{v:.5f}"))
    path = Path(config.output or RESULTS_DIR / f"truth_scenario_{spec.name}.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(truth_to_dict(truth, spec), indent=2), encoding="utf-8")
    print(f"Saved truth to {path}")
    return truth


def cmd_evaluate(config: RunConfig) -> Path:
    config.validate()
    spec = config.scenario_spec()
    report_times, taus = _study_times(config)
    if config.truth:
        truth = read_truth(config.truth)
    else:
        truth = mc_truth(spec, config.n_truth_clusters, report_times, taus, seed=config.seed)
    study = run_study(
        spec,
        config.n_reps,
        strategies=config.strategies,
        report_times=report_times,
        taus=taus,
        variance=config.variance,
        truth=truth,
        seed=config.seed,
        n_jobs=config.threads,
        alpha=config.alpha,
        progress=True,
    )
    if study.metrics is None:
        raise ConfigError("No successful replicates to summarize")
    path = study.metrics.to_csv(config.output or RESULTS_DIR / f"metrics_scenario_{spec.name}.csv")
    text = study.metrics.format_text(config.estimand)
    path.with_suffix(".txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    print(f"Saved metrics to {path}")
    if len(study.failures):
        print(f"{len(study.failures)} strategy fits failed across replicates; see the log for details.")
    return path


def cmd_probe(config: RunConfig) -> pd.DataFrame:
    config.validate()
    spec = config.scenario_spec()
    rates = censoring_rate_probe(spec, config.n_reps, config.seed)
    print(f"Scenario {spec.name}: mean censoring rate {rates['censoring_rate'].mean():.3f} over {len(rates)} trials")
    if config.output:
        path = Path(config.output)
        path.parent.mkdir(parents=True, exist_ok=True)
        rates.to_csv(path, index=False)
        print(f"Saved probe to {path}")
    return rates


COMMAND_HANDLERS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "truth": cmd_truth,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
}


def run(config: RunConfig):
    return COMMAND_HANDLERS[config.validate().command](config)
