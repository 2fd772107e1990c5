"""
Singly robust comparators: weighted Kaplan-Meier by arm and outcome-model standardization.
"""

from dataclasses import dataclass

import numpy as np

from .data_model import SurvivalDataset, aggregate_by_level
from .errors import ConfigError, NoSubjectsInArm

WEIGHTINGS = ("cluster_inverse_size", "equal")


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """Right-continuous step curve; ``grid`` is increasing and starts at 0."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.grid.shape != self.values.shape:
            raise ValueError(f"Grid and values differ in shape: {self.grid.shape} vs {self.values.shape}")

    def evaluate(self, times) -> np.ndarray | float:
        """Value at each time; queries before the first grid point return 1."""
        scalar = np.ndim(times) == 0
        times = np.atleast_1d(np.asarray(times, dtype=float))
        index = np.searchsorted(self.grid, times, side="right") - 1
        out = np.where(index >= 0, self.values[np.clip(index, 0, None)], 1.0)
        return float(out[0]) if scalar else out

    @property
    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.values) <= 1e-12))

    @property
    def in_unit_interval(self) -> bool:
        return bool(np.all((self.values >= 0) & (self.values <= 1)))


def product_limit(time: np.ndarray, event: np.ndarray, weights: np.ndarray | None = None):
    """
    Weighted product-limit pieces at the distinct event times.

    Returns (event times, weighted events Σ w dN, weighted at-risk Σ w Y).
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=float)
    weights = np.ones_like(time) if weights is None else np.asarray(weights, dtype=float)
    uniq, inverse = np.unique(time, return_inverse=True)
    weighted_events = np.bincount(inverse, weights=weights * event, minlength=len(uniq))
    weighted_total = np.bincount(inverse, weights=weights, minlength=len(uniq))
    at_risk = weighted_total[::-1].cumsum()[::-1]
    has_event = np.bincount(inverse, weights=event, minlength=len(uniq)) > 0
    return uniq[has_event], weighted_events[has_event], at_risk[has_event]


def kaplan_meier_curve(time: np.ndarray, event: np.ndarray, weights: np.ndarray | None = None) -> SurvivalCurve:
    times, d, y = product_limit(time, event, weights)
    values = np.cumprod(1.0 - d / y)
    if len(times) and times[0] == 0:
        return SurvivalCurve(times, values)
    return SurvivalCurve(np.concatenate(([0.0], times)), np.concatenate(([1.0], values)))


def participant_weights(dataset: SurvivalDataset, weighting: str) -> np.ndarray:
    if weighting == "cluster_inverse_size":
        return 1.0 / dataset.subject_cluster_size
    if weighting == "equal":
        return np.ones(dataset.n_subjects)
    raise ConfigError(f"Weighting must be one of {WEIGHTINGS}, got '{weighting}'")


def weighted_km(dataset: SurvivalDataset, arm: int, weighting: str = "equal") -> SurvivalCurve:
    """Arm-specific product-limit estimator; 1/N_i weights target the cluster-level curve."""
    weights = participant_weights(dataset, weighting)
    mask = dataset.arm_mask(arm)
    if not mask.any():
        raise NoSubjectsInArm(f"Arm {arm} has no participants")
    return kaplan_meier_curve(dataset.time[mask], dataset.event[mask], weights[mask])


@dataclass(frozen=True, eq=False)
class KaplanMeierModel:
    """
    Covariate-free model for one arm and role; same interface as the Cox fits.

    Survival is the product-limit curve and the hazard increments are d(t)/Y(t).
    """

    arm: int
    role: str
    curve: SurvivalCurve
    jump_times: np.ndarray
    jumps: np.ndarray
    backend: str = "km"

    def survival(self, design: np.ndarray, times) -> np.ndarray:
        rows = np.atleast_2d(design).shape[0]
        return np.tile(self.curve.evaluate(np.atleast_1d(times)), (rows, 1))

    def hazard_increments(self, design: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rows = np.atleast_2d(design).shape[0]
        return self.jump_times, np.tile(self.jumps, (rows, 1))


def fit_km_model(dataset: SurvivalDataset, arm: int, role: str) -> KaplanMeierModel:
    subset = dataset.subset_arm(arm)
    if subset.n_subjects == 0:
        raise NoSubjectsInArm(f"Arm {arm} has no participants")
    status = subset.role_indicator(role)
    times, d, y = product_limit(subset.time, status)
    return KaplanMeierModel(arm, role, kaplan_meier_curve(subset.time, status), times, d / y)


def standardize_outcome_model(oracle, dataset: SurvivalDataset, level: str, t) -> np.ndarray | float:
    """
    Outcome-regression (g-computation) estimate of S^(a)(t).

    Predictions are made for every participant regardless of arm, then averaged by level.
    """
    predictions = oracle.event_survival(dataset, np.atleast_1d(t))
    values = aggregate_by_level(predictions, dataset.cluster_sizes, level)
    return float(values[0]) if np.ndim(t) == 0 else values
