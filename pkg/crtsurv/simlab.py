"""
Simulation lab: scenario generator, Monte Carlo truth, and the repeated-sampling study driver.

Event and censoring times come from arm-specific gamma-frailty proportional hazards models
with constant baseline hazards, so every draw is an exact exponential. Cluster sizes are
discrete uniform on [20, 200] (mean 110, CV 0.475).
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import yaml
from joblib import Parallel, delayed
from scipy.integrate import trapezoid
from tqdm import tqdm

from .aipwcc import PropensitySpec
from .data_model import DatasetSchema, ModelFormula, SurvivalDataset
from .errors import ConfigError, CRTSurvError, StudyFailure
from .inference import jackknife
from .strategies import EstimatorPipeline, ModelCache, select_strategies

logger = logging.getLogger(__name__)

CACHE_ENV = "CRTSURV_CACHE_DIR"
DEFAULT_CACHE_DIR = Path(".crtsurv_cache")
MAX_FAILURE_RATE = 0.05
TRUTH_CHUNK = 200
COVARIATES = ("W1", "W2", "Z1", "Z2")
CLUSTER_COVARIATES = ("W1", "W2")
BASE_TERMS = "W1 + W2 + Z1 + Z2 + Z1*Z2 + N/50"


@dataclass(frozen=True)
class ScenarioSpec:
    """
    One simulation scenario. Coefficient vectors act on Q = (W1, W2, Z1, Z2, Z1·Z2, N/50).

    ``event_size_scale`` / ``censoring_size_scale`` switch the baseline hazards from constant
    to proportional to N/100. ``size_dependent_covariates`` gives W2 mean N/50 and Z1 mean
    log(N)/5 (otherwise both means are 1).
    """

    name: str
    beta_a: float
    beta: tuple[float, ...]
    beta_aN: float
    alpha: tuple[float, ...]
    rho0: float
    rho1: float
    delta0: float
    event_size_scale: bool = False
    censoring_size_scale: bool = False
    size_dependent_covariates: bool = True
    n_clusters: int = 50
    size_low: int = 20
    size_high: int = 200
    frailty_shape_treated: float = 2.0
    frailty_shape_control: float = 4.5
    censoring_frailty_shape: float = 9.5
    admin_censoring: float = 5.0
    pi1: float = 0.5
    outcome_formula: str | None = None
    censoring_formula: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if len(self.beta) != 6 or len(self.alpha) != 6:
            raise ConfigError(f"beta and alpha need 6 entries, got {len(self.beta)} and {len(self.alpha)}")
        if self.n_clusters < 2:
            raise ConfigError(f"n_clusters must be >= 2, got {self.n_clusters}")
        if not 1 <= self.size_low <= self.size_high:
            raise ConfigError(f"Invalid cluster-size range [{self.size_low}, {self.size_high}]")
        shapes = (self.frailty_shape_treated, self.frailty_shape_control, self.censoring_frailty_shape)
        if min(shapes) <= 0:
            raise ConfigError(f"Frailty shapes must be positive, got {shapes}")
        if self.rho0 - self.rho1 <= 0 or self.rho0 <= 0 or self.delta0 <= 0:
            raise ConfigError("Baseline hazards must be positive in both arms")
        PropensitySpec(self.pi1)

    @property
    def outcome_model(self) -> ModelFormula:
        if self.outcome_formula:
            return ModelFormula.parse(self.outcome_formula, "outcome")
        extra = " + log(N)" if self.event_size_scale else ""
        return ModelFormula.parse(BASE_TERMS + extra, "outcome")

    @property
    def censoring_model(self) -> ModelFormula:
        if self.censoring_formula:
            return ModelFormula.parse(self.censoring_formula, "censoring")
        extra = " + log(N)" if self.censoring_size_scale else ""
        return ModelFormula.parse(BASE_TERMS + extra, "censoring")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["beta"] = list(self.beta)
        out["alpha"] = list(self.alpha)
        return out

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def save_scenario(spec: ScenarioSpec, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False), encoding="utf-8")
    return path


def load_scenario(path: Path | str) -> ScenarioSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing scenario file: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    known = set(ScenarioSpec.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"Unknown scenario keys in {path}: {unknown}")
    try:
        return ScenarioSpec(**raw)
    except TypeError as exc:
        raise ConfigError(f"Incomplete scenario file {path}: {exc}") from exc


_SCENARIO_2_BETA = (0.5, -0.2, 0.4, 0.3, 1.0, 0.4)
_SCENARIO_3_ALPHA = (0.3, 0.8, 0.6, 0.5, 1.0, 0.4)

PRESETS = {
    "1": ScenarioSpec(
        name="1",
        beta_a=-1.5,
        beta=(0.5, 0.8, 0.4, 0.3, 1.0, 0.0),
        beta_aN=0.0,
        alpha=(0.5, 0.3, 0.3, 0.5, 0.5, 0.0),
        rho0=0.5,
        rho1=0.2,
        delta0=0.2,
        size_dependent_covariates=False,
    ),
    "2": ScenarioSpec(
        name="2",
        beta_a=0.5,
        beta=_SCENARIO_2_BETA,
        beta_aN=-1.5,
        alpha=(0.3, 1.0, 1.0, 0.5, 1.0, 0.0),
        rho0=0.6,
        rho1=0.2,
        delta0=0.001,
        event_size_scale=True,
    ),
    "3": ScenarioSpec(
        name="3",
        beta_a=0.5,
        beta=_SCENARIO_2_BETA,
        beta_aN=-1.5,
        alpha=_SCENARIO_3_ALPHA,
        rho0=0.6,
        rho1=0.2,
        delta0=0.001,
        event_size_scale=True,
        censoring_size_scale=True,
    ),
}
PRESETS["3a"] = replace(PRESETS["3"], name="3a", n_clusters=26)
PRESETS["3b"] = replace(PRESETS["3"], name="3b", rho0=0.8, delta0=0.0005)
PRESETS["3c"] = replace(PRESETS["3"], name="3c", delta0=0.04)


def scenario(name: str, /, **overrides) -> ScenarioSpec:
    """Preset scenario by name ('1', '2', '3', '3a', '3b', '3c'), optionally overridden."""
    try:
        spec = PRESETS[str(name)]
    except KeyError:
        raise ConfigError(f"Unknown scenario '{name}'; choose from {sorted(PRESETS)}") from None
    return replace(spec, **overrides) if overrides else spec


def _rng(seed) -> np.random.Generator:
    """Generator for an int seed or a (master seed, rep) pair."""
    return np.random.default_rng(list(seed) if isinstance(seed, tuple) else seed)


def _draw_population(spec: ScenarioSpec, n_clusters: int, rng: np.random.Generator) -> dict:
    """Cluster sizes and covariates, then the linear predictors that do not involve the arm."""
    sizes = rng.integers(spec.size_low, spec.size_high + 1, size=n_clusters)
    cluster = np.repeat(np.arange(n_clusters), sizes)
    n = int(sizes.sum())
    w1 = rng.binomial(1, 0.5, size=n_clusters).astype(float)
    w2_mean = sizes / 50.0 if spec.size_dependent_covariates else np.ones(n_clusters)
    w2 = rng.normal(w2_mean, 1.5)
    z1_mean = np.log(sizes) / 5.0 if spec.size_dependent_covariates else np.ones(n_clusters)
    z1 = rng.normal(z1_mean[cluster], 1.0)
    z2 = rng.binomial(1, 0.5, size=n).astype(float)
    size = sizes[cluster].astype(float)
    q = np.column_stack([w1[cluster], w2[cluster], z1, z2, z1 * z2, size / 50.0])
    return {
        "sizes": sizes,
        "cluster": cluster,
        "size": size,
        "covariates": {"W1": w1[cluster], "W2": w2[cluster], "Z1": z1, "Z2": z2},
        "event_lp": q @ np.asarray(spec.beta),
        "censoring_lp": q @ np.asarray(spec.alpha),
    }


def _event_rate(spec: ScenarioSpec, arm, size: np.ndarray, event_lp: np.ndarray) -> np.ndarray:
    """λ0^(a)(N) exp(μ^(a)) without the frailty."""
    arm = np.asarray(arm, dtype=float)
    g = size / 100.0 if spec.event_size_scale else 1.0
    baseline = (spec.rho0 - spec.rho1 * (1.0 - arm)) * g
    return baseline * np.exp(spec.beta_a * arm + event_lp + spec.beta_aN * arm * size / 50.0)


def generate_frame(spec: ScenarioSpec, seed=2025) -> pd.DataFrame:
    """One simulated trial as a participant-level frame (no validation)."""
    rng = _rng(seed)
    pop = _draw_population(spec, spec.n_clusters, rng)
    cluster = pop["cluster"]
    arm = rng.binomial(1, spec.pi1, size=spec.n_clusters)
    frailty = np.where(
        arm == 1,
        rng.gamma(spec.frailty_shape_treated, 1.0 / spec.frailty_shape_treated, size=spec.n_clusters),
        rng.gamma(spec.frailty_shape_control, 1.0 / spec.frailty_shape_control, size=spec.n_clusters),
    )
    censoring_frailty = rng.gamma(spec.censoring_frailty_shape, 1.0 / spec.censoring_frailty_shape, size=spec.n_clusters)

    event_rate = _event_rate(spec, arm[cluster], pop["size"], pop["event_lp"]) * frailty[cluster]
    g_h = pop["size"] / 100.0 if spec.censoring_size_scale else 1.0
    censoring_rate = spec.delta0 * g_h * np.exp(pop["censoring_lp"]) * censoring_frailty[cluster]
    event_time = rng.exponential(1.0 / event_rate)
    censoring_time = np.minimum(rng.exponential(1.0 / censoring_rate), spec.admin_censoring)

    width = len(str(spec.n_clusters))
    frame = pd.DataFrame(
        {
            "cluster_id": [f"c{i + 1:0{width}d}" for i in cluster],
            "time": np.minimum(event_time, censoring_time),
            "event": (event_time <= censoring_time).astype(int),
            "arm": arm[cluster],
        }
    )
    for name in COVARIATES:
        frame[name] = pop["covariates"][name]
    return frame


def generate(spec: ScenarioSpec, seed=2025) -> SurvivalDataset:
    """Simulate and validate one trial; reproducible given (spec, seed)."""
    schema = DatasetSchema(covariates=COVARIATES, cluster_covariates=CLUSTER_COVARIATES)
    return SurvivalDataset.from_frame(generate_frame(spec, seed), schema)


def example_dataset() -> SurvivalDataset:
    """Bundled example: Scenario 1, M = 50, seed 2025."""
    return generate(scenario("1"), seed=2025)


def censoring_rate_probe(spec: ScenarioSpec, n_reps: int = 200, seed: int = 2025) -> pd.DataFrame:
    """Empirical marginal censoring rate per simulated trial."""
    rates = [1.0 - generate_frame(spec, (seed, rep))["event"].mean() for rep in range(n_reps)]
    return pd.DataFrame({"rep": np.arange(n_reps), "censoring_rate": rates})


@dataclass(frozen=True, eq=False)
class TruthTable:
    """
    True curves on a fine grid plus target rows (level, quantity, time, truth, mc_se).

    Levels are ``cluster``, ``individual`` and ``gap`` (cluster minus individual).
    """

    curves: pd.DataFrame
    targets: pd.DataFrame
    n_clusters: int
    seed: int

    def value(self, level: str, quantity: str, time: float) -> float:
        row = self.targets[
            (self.targets["level"] == level)
            & (self.targets["quantity"] == quantity)
            & np.isclose(self.targets["time"], time)
        ]
        if row.empty:
            raise KeyError(f"No truth for ({level}, {quantity}, {time})")
        return float(row["truth"].iloc[0])

    def mc_se(self, level: str, quantity: str, time: float) -> float:
        row = self.targets[
            (self.targets["level"] == level)
            & (self.targets["quantity"] == quantity)
            & np.isclose(self.targets["time"], time)
        ]
        return float(row["mc_se"].iloc[0])


def truth_grid(report_times: Sequence[float], taus: Sequence[float] = (), n_points: int = 201) -> np.ndarray:
    horizon = max(list(report_times) + list(taus) + [0.0])
    return np.unique(np.concatenate((np.linspace(0.0, horizon, n_points), report_times, taus)))


def _cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, DEFAULT_CACHE_DIR))


def mc_truth(
    spec: ScenarioSpec,
    n_clusters: int = 100_000,
    report_times: Sequence[float] = (1.0,),
    taus: Sequence[float] = (),
    seed: int = 20250101,
    use_cache: bool = True,
) -> TruthTable:
    """
    Monte Carlo truth from closed-form conditional survival exp(−λ0 t B e^μ), both arms per cluster.

    Frailties B^(1), B^(0) are drawn independently. Results are cached as parquet, keyed by
    (scenario digest, n_clusters, seed, requested times).
    """
    report_times = tuple(float(t) for t in report_times)
    taus = tuple(float(t) for t in taus)
    key = hashlib.sha1(
        json.dumps([spec.digest(), n_clusters, seed, report_times, taus]).encode()
    ).hexdigest()[:16]
    cache = _cache_dir()
    curves_path = cache / f"truth_{key}_curves.parquet"
    targets_path = cache / f"truth_{key}_targets.parquet"
    if use_cache and curves_path.exists() and targets_path.exists():
        logger.info("Loaded cached truth %s", key)
        return TruthTable(pd.read_parquet(curves_path), pd.read_parquet(targets_path), n_clusters, seed)

    grid = truth_grid(report_times, taus)
    report_idx = np.searchsorted(grid, report_times)
    rng = _rng(seed)
    sums = {k: np.zeros(len(grid)) for k in ("c1", "c0", "y1", "y0")}
    total_size = 0
    per_cluster = {k: [] for k in ("n", "c1", "c0", "y1", "y0", "rc1", "rc0", "ry1", "ry0")}

    for start in range(0, n_clusters, TRUTH_CHUNK):
        m = min(TRUTH_CHUNK, n_clusters - start)
        pop = _draw_population(spec, m, rng)
        frailty = {
            1: rng.gamma(spec.frailty_shape_treated, 1.0 / spec.frailty_shape_treated, size=m),
            0: rng.gamma(spec.frailty_shape_control, 1.0 / spec.frailty_shape_control, size=m),
        }
        starts = np.concatenate(([0], np.cumsum(pop["sizes"])[:-1]))
        per_cluster["n"].append(pop["sizes"])
        total_size += int(pop["sizes"].sum())
        for a in (1, 0):
            rate = _event_rate(spec, a, pop["size"], pop["event_lp"]) * frailty[a][pop["cluster"]]
            survival = np.exp(-np.outer(rate, grid))
            y = np.add.reduceat(survival, starts, axis=0)
            c = y / pop["sizes"][:, None]
            sums[f"c{a}"] += c.sum(axis=0)
            sums[f"y{a}"] += y.sum(axis=0)
            per_cluster[f"c{a}"].append(c[:, report_idx])
            per_cluster[f"y{a}"].append(y[:, report_idx])
            per_cluster[f"rc{a}"].append(np.column_stack([_rmst_rows(grid, c, tau) for tau in taus]) if taus else np.zeros((m, 0)))
            per_cluster[f"ry{a}"].append(np.column_stack([_rmst_rows(grid, y, tau) for tau in taus]) if taus else np.zeros((m, 0)))
        logger.debug("Truth chunk %d/%d", start // TRUTH_CHUNK + 1, -(-n_clusters // TRUTH_CHUNK))

    stacked = {k: np.concatenate(v) for k, v in per_cluster.items()}
    curves = pd.DataFrame(
        {
            "time": grid,
            "S_C1": sums["c1"] / n_clusters,
            "S_C0": sums["c0"] / n_clusters,
            "S_I1": sums["y1"] / total_size,
            "S_I0": sums["y0"] / total_size,
        }
    )
    targets = _truth_targets(stacked, report_times, taus, curves)
    if use_cache:
        cache.mkdir(parents=True, exist_ok=True)
        curves.to_parquet(curves_path, index=False)
        targets.to_parquet(targets_path, index=False)
    return TruthTable(curves, targets, n_clusters, seed)


def _rmst_rows(grid: np.ndarray, values: np.ndarray, tau: float) -> np.ndarray:
    keep = grid <= tau
    return trapezoid(values[:, keep], grid[keep], axis=1)


def _level_stats(cluster_vals: np.ndarray, sum_vals: np.ndarray, sizes: np.ndarray):
    """Truth and MC SE at both levels plus the cluster-minus-individual gap."""
    m = len(sizes)
    mean_size = sizes.mean()
    c_mean = cluster_vals.mean()
    i_ratio = sum_vals.sum() / sizes.sum()
    c_se = cluster_vals.std(ddof=1) / np.sqrt(m)
    resid = (sum_vals - i_ratio * sizes) / mean_size
    i_se = np.sqrt(np.sum(resid**2)) / m
    gap = (cluster_vals - c_mean) - resid
    gap_se = np.sqrt(np.sum(gap**2)) / m
    return (c_mean, c_se), (i_ratio, i_se), (c_mean - i_ratio, gap_se)


def _truth_targets(stacked: dict, report_times, taus, curves: pd.DataFrame) -> pd.DataFrame:
    sizes = stacked["n"].astype(float)
    rows = []

    def add(quantity, time, cvals, yvals):
        (c, c_se), (i, i_se), (gap, gap_se) = _level_stats(cvals, yvals, sizes)
        rows.extend(
            [
                ("cluster", quantity, time, c, c_se),
                ("individual", quantity, time, i, i_se),
                ("gap", quantity, time, gap, gap_se),
            ]
        )

    for k, t in enumerate(report_times):
        add("S1", t, stacked["c1"][:, k], stacked["y1"][:, k])
        add("S0", t, stacked["c0"][:, k], stacked["y0"][:, k])
        add("SPCE", t, stacked["c1"][:, k] - stacked["c0"][:, k], stacked["y1"][:, k] - stacked["y0"][:, k])
    for k, tau in enumerate(taus):
        add("RMST1", tau, stacked["rc1"][:, k], stacked["ry1"][:, k])
        add("RMST0", tau, stacked["rc0"][:, k], stacked["ry0"][:, k])
        add("RMST", tau, stacked["rc1"][:, k] - stacked["rc0"][:, k], stacked["ry1"][:, k] - stacked["ry0"][:, k])
    return pd.DataFrame(rows, columns=["level", "quantity", "time", "truth", "mc_se"])


@dataclass(frozen=True, eq=False)
class MetricsTable:
    """PBias (%), MCSD, AESE and CP per (strategy, level, quantity, time)."""

    frame: pd.DataFrame

    @property
    def has_inference(self) -> bool:
        return "aese" in self.frame.columns

    def row(self, strategy: str, level: str, quantity: str, time: float) -> pd.Series:
        f = self.frame
        match = f[(f["strategy"] == strategy) & (f["level"] == level) & (f["quantity"] == quantity) & np.isclose(f["time"], time)]
        if match.empty:
            raise KeyError(f"No metrics for ({strategy}, {level}, {quantity}, {time})")
        return match.iloc[0]

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False)
        return path

    def format_text(self, quantity: str = "SPCE") -> str:
        return format_metrics_text(self, quantity)


def metrics_table(records: pd.DataFrame, truth: TruthTable, quantities: Sequence[str] = ("SPCE", "RMST")) -> MetricsTable:
    """Summarize per-replicate estimates against the truth."""
    truths = truth.targets[truth.targets["level"] != "gap"][["level", "quantity", "time", "truth"]]
    data = records[records["quantity"].isin(quantities)].copy()
    data["time"] = data["time"].astype(float).round(12)
    truths = truths.assign(time=truths["time"].astype(float).round(12))
    data = data.merge(truths, on=["level", "quantity", "time"], how="left")
    if data["truth"].isna().any():
        missing = data.loc[data["truth"].isna(), ["level", "quantity", "time"]].drop_duplicates()
        raise ConfigError(f"Truth missing for targets:\n{missing.to_string(index=False)}")

    with_se = "se" in data.columns and data["se"].notna().any()
    rows = []
    for (strategy, level, quantity, time), group in data.groupby(["strategy", "level", "quantity", "time"], sort=False):
        true = float(group["truth"].iloc[0])
        mean = float(group["estimate"].mean())
        row = {
            "strategy": strategy,
            "level": level,
            "quantity": quantity,
            "time": time,
            "truth": true,
            "mean": mean,
            "pbias": abs(mean - true) / abs(true) * 100.0 if true != 0 else np.nan,
            "mcsd": float(group["estimate"].std(ddof=1)) if len(group) > 1 else np.nan,
            "n_reps": len(group),
        }
        if with_se:
            row["aese"] = float(group["se"].mean())
            row["cp"] = float(((group["lower"] <= true) & (true <= group["upper"])).mean())
        rows.append(row)
    return MetricsTable(pd.DataFrame(rows))


def format_metrics_text(table: MetricsTable, quantity: str = "SPCE") -> str:
    """Plain-text table in PBias, MCSD, AESE, CP column order."""
    frame = table.frame[table.frame["quantity"] == quantity]
    columns = ["strategy", "level", "time", "pbias", "mcsd"] + (["aese", "cp"] if table.has_inference else [])
    if frame.empty:
        return f"No {quantity} rows."
    renamed = frame[columns].rename(columns={"pbias": "PBias", "mcsd": "MCSD", "aese": "AESE", "cp": "CP"})
    return renamed.to_string(index=False, float_format=lambda v: f"{v:.3f}")


@dataclass(frozen=True, eq=False)
class StudyResult:
    records: pd.DataFrame
    failures: pd.DataFrame
    metrics: MetricsTable | None = None
    settings: dict = field(default_factory=dict)


def _run_replicate(
    spec: ScenarioSpec, rep: int, seed: int, pipelines: list[EstimatorPipeline], variance: str, alpha: float
) -> tuple[list[pd.DataFrame], list[dict]]:
    frames, failures = [], []
    try:
        dataset = generate(spec, (seed, rep))
    except CRTSurvError as exc:
        return frames, [{"rep": rep, "strategy": "*", "error": type(exc).__name__, "message": str(exc)}]
    cache = ModelCache(dataset, pipelines[0].fit_controls, pipelines[0].frailty_controls)
    for pipeline in pipelines:
        try:
            report = pipeline(dataset, cache)
            estimates = report.estimates
            if variance == "jackknife":
                estimates = jackknife(dataset, pipeline, alpha=alpha, point=report).targets
        except CRTSurvError as exc:
            failures.append(
                {"rep": rep, "strategy": pipeline.strategy.name, "error": type(exc).__name__, "message": str(exc)}
            )
            continue
        frames.append(estimates.assign(rep=rep, strategy=pipeline.strategy.name))
    return frames, failures


def run_study(
    spec: ScenarioSpec,
    n_reps: int,
    strategies: Sequence[str] = ("marginal-o1c1",),
    report_times: Sequence[float] = (1.0,),
    taus: Sequence[float] = (),
    variance: str = "none",
    truth: TruthTable | None = None,
    seed: int = 2025,
    n_jobs: int = 1,
    alpha: float = 0.05,
    levels: Sequence[str] = ("cluster", "individual"),
    progress: bool = False,
) -> StudyResult:
    """
    Repeated sampling: generate, fit each strategy, record estimates (and jackknife SE/CI).

    Replicate r uses seed (seed, r). A strategy failing in more than 5% of replicates aborts
    the study with StudyFailure.
    """
    if variance not in ("none", "jackknife"):
        raise ConfigError(f"variance must be 'none' or 'jackknife', got '{variance}'")
    selected = select_strategies(list(strategies), spec.outcome_model, None)
    selected = [
        replace(s, censoring_formula=spec.censoring_model if s.censoring_formula.terms == spec.outcome_model.terms else s.censoring_formula)
        if s.kind == "aipwcc"
        else s
        for s in selected
    ]
    pipelines = [
        EstimatorPipeline(
            s,
            PropensitySpec(spec.pi1),
            tuple(float(t) for t in report_times),
            tuple(float(t) for t in taus),
            levels=tuple(levels),
        )
        for s in selected
    ]
    logger.info("Study: scenario %s, %d reps, %d strategies, variance=%s", spec.name, n_reps, len(pipelines), variance)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_replicate)(spec, rep, seed, pipelines, variance, alpha)
        for rep in tqdm(range(n_reps), disable=not progress, desc=f"scenario {spec.name}")
    )
    frames = [f for fs, _ in results for f in fs]
    failures = pd.DataFrame(
        [x for _, xs in results for x in xs], columns=["rep", "strategy", "error", "message"]
    )
    for failure in failures.itertuples(index=False):
        logger.warning("Replicate %d failed for %s: %s", failure.rep, failure.strategy, failure.message)
    if len(failures):
        per_strategy = failures.groupby("strategy")["rep"].nunique()
        whole_rep = per_strategy.pop("*") if "*" in per_strategy.index else 0
        worst = (per_strategy.max() if len(per_strategy) else 0) + whole_rep
        if worst > MAX_FAILURE_RATE * n_reps:
            raise StudyFailure(f"{worst} of {n_reps} replicates failed (limit {MAX_FAILURE_RATE:.0%})")
    records = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    metrics = metrics_table(records, truth) if truth is not None and not records.empty else None
    settings = {"scenario": spec.name, "n_reps": n_reps, "seed": seed, "variance": variance, "strategies": list(strategies)}
    return StudyResult(records, failures, metrics, settings)
