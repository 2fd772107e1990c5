"""
Estimation strategies and the full fit-and-estimate recipe used by the jackknife and the studies.

Strategy names follow the pattern <backend>-o<k>c<k> for AIPWCC (outcome / censoring model
correctly specified or not), <backend>-OR<k> for outcome-regression standardization and KM.
"""

import logging
import re
from dataclasses import dataclass, field

from .aipwcc import (
    LEVELS,
    ConditionalSurvivalOracle,
    EstimandReport,
    PropensitySpec,
    contribution_matrix,
    evaluation_grid,
    report_from_curves,
)
from .cox_frailty import FrailtyControls, fit_frailty
from .cox_marginal import FitControls, fit_cox
from .data_model import ModelFormula, SurvivalDataset, aggregate_by_level
from .errors import ConfigError, NoEventsInRole, TooFewClusters
from .nonparam import SurvivalCurve, fit_km_model, weighted_km

logger = logging.getLogger(__name__)

KINDS = ("aipwcc", "outcome_regression", "km")
_SIZE_TERM = re.compile(r"\bN\b")


@dataclass(frozen=True)
class Strategy:
    name: str
    kind: str
    backend: str
    outcome_formula: ModelFormula = ModelFormula()
    censoring_formula: ModelFormula = ModelFormula((), "censoring")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"Strategy kind must be one of {KINDS}, got '{self.kind}'")

    @property
    def requires_censoring_model(self) -> bool:
        return self.kind == "aipwcc" and self.backend != "km"


def misspecify(formula: ModelFormula) -> ModelFormula:
    """Drop product terms and every term involving cluster size."""
    dropped = [t for t in formula.terms if "*" in t or _SIZE_TERM.search(t)]
    return formula.without(*dropped)


def strategy_catalog(correct: ModelFormula, misspecified: ModelFormula | None = None) -> list[Strategy]:
    """The thirteen comparison strategies, in reporting order."""
    wrong = misspecified if misspecified is not None else misspecify(correct)
    formulas = {1: correct, 0: wrong}
    catalog = []
    for backend in ("marginal", "frailty"):
        for o, c in ((1, 1), (1, 0), (0, 1), (0, 0)):
            catalog.append(
                Strategy(
                    f"{backend}-o{o}c{c}",
                    "aipwcc",
                    backend,
                    formulas[o].with_role("outcome"),
                    formulas[c].with_role("censoring"),
                )
            )
    for backend in ("marginal", "frailty"):
        for o in (1, 0):
            catalog.append(Strategy(f"{backend}-OR{o}", "outcome_regression", backend, formulas[o].with_role("outcome")))
    catalog.append(Strategy("KM", "km", "km"))
    return catalog


def select_strategies(names, correct: ModelFormula, misspecified: ModelFormula | None = None) -> list[Strategy]:
    catalog = {s.name: s for s in strategy_catalog(correct, misspecified)}
    unknown = [n for n in names if n not in catalog]
    if unknown:
        raise ConfigError(f"Unknown strategies {unknown}; choose from {list(catalog)}")
    return [catalog[n] for n in names]


@dataclass
class ModelCache:
    """Fits keyed by (backend, arm, role, terms), valid for a single dataset."""

    dataset: SurvivalDataset
    fit_controls: FitControls = FitControls()
    frailty_controls: FrailtyControls = FrailtyControls()
    fits: dict = field(default_factory=dict)

    def get(self, backend: str, arm: int, role: str, formula: ModelFormula):
        key = (backend, arm, role, formula.terms)
        if key not in self.fits:
            formula = formula.with_role(role)
            if backend == "marginal":
                self.fits[key] = fit_cox(self.dataset, arm, role, formula, self.fit_controls)
            elif backend == "frailty":
                self.fits[key] = fit_frailty(self.dataset, arm, role, formula, self.frailty_controls)
            else:
                self.fits[key] = fit_km_model(self.dataset, arm, role)
        return self.fits[key]

    def oracle(self, strategy: Strategy, arm: int, with_censoring: bool) -> ConditionalSurvivalOracle:
        if strategy.backend == "km":
            outcome_formula, censoring_formula = ModelFormula(), ModelFormula((), "censoring")
        else:
            outcome_formula, censoring_formula = strategy.outcome_formula, strategy.censoring_formula
        outcome = self.get(strategy.backend, arm, "outcome", outcome_formula)
        censoring = self.get(strategy.backend, arm, "censoring", censoring_formula) if with_censoring else None
        return ConditionalSurvivalOracle(
            arm,
            strategy.backend,
            outcome,
            censoring,
            outcome_formula.with_role("outcome"),
            censoring_formula.with_role("censoring"),
        )


@dataclass(frozen=True)
class EstimatorPipeline:
    """Refit every nuisance model of ``strategy`` on a dataset and build the report."""

    strategy: Strategy
    propensity: PropensitySpec = PropensitySpec()
    report_times: tuple[float, ...] = ()
    taus: tuple[float, ...] = ()
    scale: str = "difference"
    levels: tuple[str, ...] = LEVELS
    fit_controls: FitControls = FitControls()
    frailty_controls: FrailtyControls = FrailtyControls()

    def check_feasible(self, dataset: SurvivalDataset) -> None:
        """Raise a validation error if this dataset cannot support the strategy's fits."""
        for a in (1, 0):
            subset = dataset.subset_arm(a)
            if self.strategy.requires_censoring_model and subset.role_indicator("censoring").sum() == 0:
                raise NoEventsInRole(f"Arm {a} has no censorings to fit the censoring model")
            if self.strategy.backend == "frailty" and subset.n_clusters < 2:
                raise TooFewClusters(f"Arm {a} keeps {subset.n_clusters} cluster(s); the frailty model needs 2")

    def __call__(self, dataset: SurvivalDataset, cache: ModelCache | None = None) -> EstimandReport:
        if cache is None or cache.dataset is not dataset:
            cache = ModelCache(dataset, self.fit_controls, self.frailty_controls)
        grid = evaluation_grid(dataset, self.report_times, self.taus)
        strategy = self.strategy
        diagnostics = {}
        if strategy.kind == "km":
            weighting = {"cluster": "cluster_inverse_size", "individual": "equal"}
            curves = {
                (level, a): SurvivalCurve(grid, weighted_km(dataset, a, weighting[level]).evaluate(grid))
                for level in self.levels
                for a in (1, 0)
            }
        elif strategy.kind == "outcome_regression":
            predictions = {a: cache.oracle(strategy, a, with_censoring=False).event_survival(dataset, grid) for a in (1, 0)}
            curves = {
                (level, a): SurvivalCurve(grid, aggregate_by_level(predictions[a], dataset.cluster_sizes, level))
                for level in self.levels
                for a in (1, 0)
            }
        else:
            matrices = {
                a: contribution_matrix(dataset, cache.oracle(strategy, a, with_censoring=True), self.propensity, grid)
                for a in (1, 0)
            }
            curves = {
                (level, a): matrices[a].aggregate(dataset.cluster_sizes, level) for level in self.levels for a in (1, 0)
            }
            diagnostics["n_truncated"] = int(sum(m.n_truncated for m in matrices.values()))
        diagnostics.update(self._fit_diagnostics(cache))
        return report_from_curves(
            curves, self.report_times, self.taus, self.scale, header=self.header(dataset), diagnostics=diagnostics
        )

    def header(self, dataset: SurvivalDataset) -> dict:
        info = dataset.describe()
        return {
            "strategy": self.strategy.name,
            "kind": self.strategy.kind,
            "method": self.strategy.backend,
            "outcome_formula": str(self.strategy.outcome_formula),
            "censoring_formula": str(self.strategy.censoring_formula) if self.strategy.requires_censoring_model else None,
            "pi": self.propensity.pi1,
            "scale": self.scale,
            "M": info["M"],
            "N": info["N"],
        }

    @staticmethod
    def _fit_diagnostics(cache: ModelCache) -> dict:
        shapes = {
            f"{role}_arm{arm}": float(fit.shape)
            for (backend, arm, role, _), fit in cache.fits.items()
            if backend == "frailty"
        }
        boundary = [
            f"{role}_arm{arm}" for (backend, arm, role, _), fit in cache.fits.items() if getattr(fit, "at_boundary", False)
        ]
        out = {}
        if shapes:
            out["frailty_shapes"] = shapes
            out["frailty_at_boundary"] = sorted(boundary)
        return out


def run_strategies(
    dataset: SurvivalDataset,
    pipelines: list[EstimatorPipeline],
) -> dict[str, EstimandReport]:
    """Evaluate several pipelines on one dataset, sharing nuisance fits across strategies."""
    if not pipelines:
        return {}
    cache = ModelCache(dataset, pipelines[0].fit_controls, pipelines[0].frailty_controls)
    return {p.strategy.name: p(dataset, cache) for p in pipelines}
