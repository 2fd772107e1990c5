"""
Doubly robust AIPWCC estimators of arm-specific survival curves in cluster-randomized trials.

Each participant gets a contribution S_ij^(a)(t): an inverse-probability-of-censoring
weighted term, minus the propensity augmentation with the outcome model, plus the
censoring-martingale augmentation. Contributions are averaged per cluster then over
clusters (cluster level) or pooled (individual level). RMST follows by the trapezoid rule
on the same grid.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from .cox_frailty import FrailtyControls, fit_frailty
from .cox_marginal import FitControls, fit_cox
from .data_model import ModelFormula, SurvivalDataset, aggregate_by_level, build_design
from .errors import (
    CensoringSurvivalUnderflow,
    ConfigError,
    InvalidGrid,
    InvalidPropensity,
    OracleArmMismatch,
    RatioDenominatorZero,
    RoleMismatch,
    TauBeyondGrid,
    TauExtrapolationWarning,
)
from .nonparam import SurvivalCurve, fit_km_model

logger = logging.getLogger(__name__)

BACKENDS = ("marginal", "frailty", "km")
LEVELS = ("cluster", "individual")
SCALES = ("difference", "ratio")
CENSORING_FLOOR = 1e-8
ROW_CHUNK = 512


@dataclass(frozen=True)
class PropensitySpec:
    """Known randomization probability; never estimated."""

    pi1: float = 0.5

    def __post_init__(self):
        if not 0 < self.pi1 < 1:
            raise InvalidPropensity(f"pi must lie strictly inside (0, 1), got {self.pi1}")

    def pi(self, arm: int) -> float:
        return self.pi1 if arm == 1 else 1.0 - self.pi1


@dataclass(frozen=True, eq=False)
class ConditionalSurvivalOracle:
    """
    Fitted nuisance models of one arm: P(T >= t | V), K_c(t | V) and dH_c(u | V).

    ``outcome`` and ``censoring`` are CoxFit, FrailtyFit or KaplanMeierModel objects; the
    censoring model may be absent for outcome-regression use.
    """

    arm: int
    backend: str
    outcome: object
    censoring: object | None
    outcome_formula: ModelFormula = ModelFormula()
    censoring_formula: ModelFormula = ModelFormula((), "censoring")
    _designs: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        for model, role in ((self.outcome, "outcome"), (self.censoring, "censoring")):
            if model is None:
                continue
            if model.arm != self.arm:
                raise OracleArmMismatch(f"{role} model was fitted on arm {model.arm}, oracle is for arm {self.arm}")
            if model.role != role:
                raise RoleMismatch(f"Expected a {role} model, got a {model.role} model")

    def _design(self, dataset: SurvivalDataset, formula: ModelFormula, rows) -> np.ndarray:
        cached = self._designs.get(formula.role)
        if cached is None or cached[0] is not dataset:
            cached = (dataset, build_design(dataset, formula))
            self._designs[formula.role] = cached
        design = cached[1]
        return design if rows is None else design[rows]

    def event_survival(self, dataset: SurvivalDataset, times, rows=None) -> np.ndarray:
        return self.outcome.survival(self._design(dataset, self.outcome_formula, rows), times)

    def censoring_survival(self, dataset: SurvivalDataset, times, rows=None) -> np.ndarray:
        self._require_censoring()
        return self.censoring.survival(self._design(dataset, self.censoring_formula, rows), times)

    def censoring_hazard_increments(self, dataset: SurvivalDataset, rows=None) -> tuple[np.ndarray, np.ndarray]:
        self._require_censoring()
        return self.censoring.hazard_increments(self._design(dataset, self.censoring_formula, rows))

    def _require_censoring(self):
        if self.censoring is None:
            raise RoleMismatch(f"Oracle for arm {self.arm} has no censoring model")


def build_oracle(
    dataset: SurvivalDataset,
    arm: int,
    backend: str,
    outcome_formula: ModelFormula,
    censoring_formula: ModelFormula | None = None,
    fit_controls: FitControls = FitControls(),
    frailty_controls: FrailtyControls = FrailtyControls(),
    with_censoring: bool = True,
) -> ConditionalSurvivalOracle:
    """Fit the outcome (and censoring) model of one arm with the requested backend."""
    if backend not in BACKENDS:
        raise ConfigError(f"Backend must be one of {BACKENDS}, got '{backend}'")
    outcome_formula = outcome_formula.with_role("outcome")
    censoring_formula = (censoring_formula or outcome_formula).with_role("censoring")
    if backend == "km":
        outcome = fit_km_model(dataset, arm, "outcome")
        censoring = fit_km_model(dataset, arm, "censoring") if with_censoring else None
        return ConditionalSurvivalOracle(arm, backend, outcome, censoring, ModelFormula(), ModelFormula((), "censoring"))
    if backend == "marginal":
        outcome = fit_cox(dataset, arm, "outcome", outcome_formula, fit_controls)
        censoring = fit_cox(dataset, arm, "censoring", censoring_formula, fit_controls) if with_censoring else None
    else:
        outcome = fit_frailty(dataset, arm, "outcome", outcome_formula, frailty_controls)
        censoring = fit_frailty(dataset, arm, "censoring", censoring_formula, frailty_controls) if with_censoring else None
    return ConditionalSurvivalOracle(arm, backend, outcome, censoring, outcome_formula, censoring_formula)


def subject_contribution(
    observed_time: float,
    event: int,
    in_arm: bool,
    pi: float,
    t: float,
    event_survival: Callable[[float], float],
    censoring_survival: Callable[[float], float],
    jump_times: Sequence[float] = (),
    jump_sizes: Sequence[float] = (),
    floor: float = CENSORING_FLOOR,
) -> float:
    """
    Contribution of one participant to S^(a)(t), evaluated term by term.

    ``in_arm`` is A^a (1 − A)^(1 − a); ``jump_sizes`` are the participant's censoring-hazard
    increments dH(u_k | v). The vectorized path in ``contribution_matrix`` must agree with this.
    """
    s_t = event_survival(t)
    indicator = 1.0 if in_arm else 0.0
    augmentation = ((indicator - pi) / pi) * s_t
    if not in_arm:
        return -augmentation
    k_t = censoring_survival(t)
    if k_t < floor:
        k_t = floor
    weighted = float(observed_time >= t) / (pi * k_t)
    martingale = 0.0
    for u, dh in zip(jump_times, jump_sizes):
        if u > min(t, observed_time):
            break
        dm = float(observed_time == u and event == 0) - float(observed_time >= u) * dh
        s_u = event_survival(u)
        if s_u > 0:
            martingale += dm / (max(censoring_survival(u), floor) * s_u)
    return weighted - augmentation + indicator * s_t * martingale / pi


@dataclass(frozen=True, eq=False)
class ContributionMatrix:
    """Per-participant contributions (rows, cluster-contiguous) on a time grid (columns)."""

    arm: int
    grid: np.ndarray
    values: np.ndarray
    n_truncated: int = 0

    def aggregate(self, cluster_sizes: np.ndarray, level: str) -> SurvivalCurve:
        return SurvivalCurve(self.grid, aggregate_by_level(self.values, cluster_sizes, level))


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0 or grid[0] != 0 or np.any(np.diff(grid) <= 0):
        raise InvalidGrid("Grid must be strictly increasing and start at 0")
    return grid


def contribution_matrix(
    dataset: SurvivalDataset,
    oracle: ConditionalSurvivalOracle,
    propensity: PropensitySpec,
    grid,
    floor: float = CENSORING_FLOOR,
    strict_floor: bool = False,
) -> ContributionMatrix:
    """Contributions of every participant to S^(a) on ``grid``."""
    grid = _check_grid(grid)
    a = oracle.arm
    pi = propensity.pi(a)
    in_arm = dataset.arm_mask(a)
    survival = oracle.event_survival(dataset, grid)
    # participants outside arm a: −((0 − π)/π) S = S
    values = survival.copy()

    arm_rows = np.flatnonzero(in_arm)
    n_truncated = 0
    for start in range(0, len(arm_rows), ROW_CHUNK):
        rows = arm_rows[start : start + ROW_CHUNK]
        block, truncated = _arm_block(dataset, oracle, rows, survival[rows], pi, grid, floor)
        values[rows] = block
        n_truncated += truncated
    if n_truncated:
        if strict_floor:
            raise CensoringSurvivalUnderflow(
                f"Censoring survival fell below {floor:g} for {n_truncated} evaluations in arm {a}"
            )
        logger.debug("Truncated %d censoring-survival evaluations at %g (arm %d)", n_truncated, floor, a)
    return ContributionMatrix(a, grid, values, n_truncated)


def _arm_block(dataset, oracle, rows, survival, pi, grid, floor):
    observed = dataset.time[rows]
    censored = dataset.event[rows] == 0
    k_grid = oracle.censoring_survival(dataset, grid, rows)
    truncated = int(np.sum(k_grid < floor))
    k_grid = np.maximum(k_grid, floor)
    weighted = (observed[:, None] >= grid[None, :]) / (pi * k_grid)

    jump_times, jump_sizes = oracle.censoring_hazard_increments(dataset, rows)
    if len(jump_times):
        k_jump = oracle.censoring_survival(dataset, jump_times, rows)
        truncated += int(np.sum(k_jump < floor))
        k_jump = np.maximum(k_jump, floor)
        s_jump = oracle.event_survival(dataset, jump_times, rows)
        counting = (observed[:, None] == jump_times[None, :]) & censored[:, None]
        at_risk = observed[:, None] >= jump_times[None, :]
        d_martingale = counting.astype(float) - at_risk * jump_sizes
        with np.errstate(divide="ignore", invalid="ignore"):
            integrand = np.where(s_jump > 0, d_martingale / (k_jump * s_jump), 0.0)
        cumulative = np.concatenate((np.zeros((len(rows), 1)), np.cumsum(integrand, axis=1)), axis=1)
        upper = np.minimum(grid[None, :], observed[:, None])
        n_jumps = np.searchsorted(jump_times, upper.ravel(), side="right").reshape(upper.shape)
        martingale = np.take_along_axis(cumulative, n_jumps, axis=1)
    else:
        martingale = np.zeros_like(survival)
    block = weighted - ((1.0 - pi) / pi) * survival + survival * martingale / pi
    return block, truncated


def estimate_survival(
    dataset: SurvivalDataset,
    oracles: dict[int, ConditionalSurvivalOracle],
    propensity: PropensitySpec,
    level: str,
    grid,
) -> dict[int, SurvivalCurve]:
    """Aggregated AIPWCC survival curve per arm; values are not clipped to [0, 1]."""
    if level not in LEVELS:
        raise ConfigError(f"Level must be one of {LEVELS}, got '{level}'")
    curves = {}
    for a, oracle in oracles.items():
        if oracle.arm != a:
            raise OracleArmMismatch(f"Oracle keyed as arm {a} was fitted on arm {oracle.arm}")
        curves[a] = contribution_matrix(dataset, oracle, propensity, grid).aggregate(dataset.cluster_sizes, level)
    return curves


def apply_scale(x, y, scale: str):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if scale == "difference":
        return x - y
    if scale == "ratio":
        if np.any(y == 0):
            raise RatioDenominatorZero("Ratio effect undefined: arm-0 value is 0")
        return x / y
    raise ConfigError(f"Scale must be one of {SCALES}, got '{scale}'")


def effect_spce(curves: tuple[SurvivalCurve, SurvivalCurve], scale: str, t) -> float:
    arm1, arm0 = curves
    return float(apply_scale(arm1.evaluate(t), arm0.evaluate(t), scale))


def _restrict_to_tau(grid: np.ndarray, values: np.ndarray, tau: float, extrapolate: bool):
    """Grid points in [0, τ] with τ appended by step evaluation; ``values`` has time as last axis."""
    if tau > grid[-1]:
        if not extrapolate:
            raise TauBeyondGrid(f"tau={tau:g} lies beyond the last grid point {grid[-1]:g}")
        warnings.warn(
            f"tau={tau:g} lies beyond the last grid point {grid[-1]:g}; curve step-extended",
            TauExtrapolationWarning,
        )
    keep = grid <= tau
    sub_grid = grid[keep]
    sub_values = values[..., keep]
    if sub_grid[-1] < tau:
        last = values[..., np.searchsorted(grid, tau, side="right") - 1]
        sub_grid = np.append(sub_grid, tau)
        sub_values = np.concatenate((sub_values, last[..., None]), axis=-1)
    return sub_grid, sub_values


def rmst_from_curve(curve: SurvivalCurve, tau: float, extrapolate: bool = True) -> float:
    """Trapezoid Σ (u_{k+1} − u_k)/2 (S(u_k) + S(u_{k+1})) over the grid restricted to [0, τ]."""
    grid = _check_grid(curve.grid)
    sub_grid, sub_values = _restrict_to_tau(grid, curve.values, tau, extrapolate)
    return float(trapezoid(sub_values, sub_grid))


def effect_rmst(
    arm1: ContributionMatrix,
    arm0: ContributionMatrix,
    cluster_sizes: np.ndarray,
    tau: float,
    level: str,
    scale: str = "difference",
    extrapolate: bool = True,
) -> float:
    """
    RMST effect from per-participant contributions on a shared grid.

    On the difference scale the participant-level arm differences are integrated and then
    aggregated; the ratio scale applies f to the aggregated per-arm RMSTs.
    """
    if not np.array_equal(arm1.grid, arm0.grid):
        raise InvalidGrid("Both arms must be evaluated on the same grid")
    grid = _check_grid(arm1.grid)
    if scale == "difference":
        sub_grid, diff = _restrict_to_tau(grid, arm1.values - arm0.values, tau, extrapolate)
        per_subject = trapezoid(diff, sub_grid, axis=-1)
        return float(aggregate_by_level(per_subject, cluster_sizes, level))
    rmst = [rmst_from_curve(m.aggregate(cluster_sizes, level), tau, extrapolate) for m in (arm1, arm0)]
    return float(apply_scale(rmst[0], rmst[1], scale))


def evaluation_grid(dataset: SurvivalDataset, report_times: Sequence[float] = (), taus: Sequence[float] = ()) -> np.ndarray:
    """
    0, the observed event times of both arms and the requested report times and horizons.

    Event times beyond the largest requested time are dropped when any time is requested.
    """
    requested = np.asarray(list(report_times) + list(taus), dtype=float)
    events = np.unique(dataset.time[dataset.event == 1])
    if len(requested):
        events = events[events <= requested.max()]
    return np.unique(np.concatenate(([0.0], events, requested)))


@dataclass(frozen=True, eq=False)
class EstimandReport:
    """
    Point estimates (and optional jackknife SE/CI) for both levels.

    ``estimates`` is a tidy frame with columns level, quantity, time, estimate and, after
    inference, se, lower, upper. Quantities: S1, S0 and SPCE at report times; RMST1, RMST0
    and RMST (the effect) at each τ.
    """

    estimates: pd.DataFrame
    curves: dict[tuple[str, int], SurvivalCurve]
    scale: str
    header: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def has_inference(self) -> bool:
        return "se" in self.estimates.columns

    def value(self, level: str, quantity: str, time: float) -> float:
        row = self.estimates[
            (self.estimates["level"] == level)
            & (self.estimates["quantity"] == quantity)
            & np.isclose(self.estimates["time"], time)
        ]
        if row.empty:
            raise KeyError(f"No estimate for ({level}, {quantity}, {time})")
        return float(row["estimate"].iloc[0])

    def target_vector(self) -> np.ndarray:
        return self.estimates["estimate"].to_numpy(dtype=float)


def report_from_curves(
    curves: dict[tuple[str, int], SurvivalCurve],
    report_times: Sequence[float],
    taus: Sequence[float],
    scale: str = "difference",
    header: dict | None = None,
    diagnostics: dict | None = None,
) -> EstimandReport:
    """Assemble the report rows from per-level, per-arm curves on a shared grid."""
    rows = []
    for level in LEVELS:
        if (level, 1) not in curves:
            continue
        arm1, arm0 = curves[(level, 1)], curves[(level, 0)]
        for t in report_times:
            s1, s0 = arm1.evaluate(t), arm0.evaluate(t)
            rows += [
                (level, "S1", t, s1),
                (level, "S0", t, s0),
                (level, "SPCE", t, float(apply_scale(s1, s0, scale))),
            ]
        for tau in taus:
            r1, r0 = rmst_from_curve(arm1, tau), rmst_from_curve(arm0, tau)
            rows += [
                (level, "RMST1", tau, r1),
                (level, "RMST0", tau, r0),
                (level, "RMST", tau, float(apply_scale(r1, r0, scale))),
            ]
    estimates = pd.DataFrame(rows, columns=["level", "quantity", "time", "estimate"])
    diagnostics = dict(diagnostics or {})
    diagnostics["n_out_of_range"] = int(sum(np.sum((c.values < 0) | (c.values > 1)) for c in curves.values()))
    diagnostics["non_monotone_curves"] = sorted(f"{lvl}/{a}" for (lvl, a), c in curves.items() if not c.is_monotone)
    return EstimandReport(estimates, curves, scale, dict(header or {}), diagnostics)


def estimate(
    dataset: SurvivalDataset,
    oracles: dict[int, ConditionalSurvivalOracle],
    propensity: PropensitySpec = PropensitySpec(),
    report_times: Sequence[float] = (),
    taus: Sequence[float] = (),
    scale: str = "difference",
    levels: Sequence[str] = LEVELS,
) -> EstimandReport:
    """AIPWCC report: both arms, the requested levels, SPCE at report times and RMST at each τ."""
    grid = evaluation_grid(dataset, report_times, taus)
    matrices = {a: contribution_matrix(dataset, oracles[a], propensity, grid) for a in (1, 0)}
    curves = {
        (level, a): matrices[a].aggregate(dataset.cluster_sizes, level) for level in levels for a in (1, 0)
    }
    diagnostics = {"n_truncated": int(sum(m.n_truncated for m in matrices.values()))}
    return report_from_curves(curves, report_times, taus, scale, diagnostics=diagnostics)
