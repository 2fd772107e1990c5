"""
Arm-specific gamma-frailty Cox models and their frailty-integrated (marginal) quantities.

The frailty B_i ~ Gamma(shape, rate=shape) multiplies the hazard of every participant in
cluster i. The shape maximizes the profile observed-data likelihood on a bounded log scale.
At each trial shape an EM alternates posterior frailty means with an offset Cox fit for
(β, baseline) until the likelihood settles.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import gammaln

from .cox_marginal import FitControls, _arm_arrays, _check_role, _scalar_or_array, breslow_increments, newton_raphson
from .data_model import ModelFormula, SurvivalDataset
from .errors import NonConvergence, ThetaBoundaryWarning, TooFewClusters

logger = logging.getLogger(__name__)


def kendall_tau(shape: float) -> float:
    return 1.0 / (2.0 * shape + 1.0)


def shape_from_kendall_tau(tau: float) -> float:
    if not 0 < tau < 1:
        raise ValueError(f"Kendall's tau must lie in (0, 1), got {tau}")
    return (1.0 / tau - 1.0) / 2.0


@dataclass(frozen=True)
class FrailtyControls:
    tol: float = 1e-8  # relative log-likelihood change that ends the inner EM
    max_inner: int = 500
    shape_bounds: tuple[float, float] = (1e-4, 1e6)
    shape_xatol: float = 1e-3  # on log shape
    flat_tol: float = 1e-3  # log-likelihood units
    shape_init: float = 4.5  # Kendall's tau = 0.1
    newton: FitControls = FitControls()


def laplace_survival(shape, cumulative_hazard):
    """E[exp(−B Λ)] for B ~ Gamma(shape, shape): (shape / (shape + Λ))^shape."""
    shape = np.asarray(shape, dtype=float)
    cumulative_hazard = np.asarray(cumulative_hazard, dtype=float)
    return np.exp(-shape * np.log1p(cumulative_hazard / shape))


def posterior_frailty_mean(shape, cumulative_hazard):
    """E[B | T >= t] = shape / (shape + Λ(t | B=1))."""
    shape = np.asarray(shape, dtype=float)
    return shape / (shape + np.asarray(cumulative_hazard, dtype=float))


@dataclass(frozen=True, eq=False)
class FrailtyFit:
    arm: int
    role: str
    formula: ModelFormula
    coefficients: np.ndarray
    baseline_times: np.ndarray
    baseline_increments: np.ndarray
    shape: float
    log_likelihood: float
    iterations: int
    at_boundary: bool = False
    backend: str = "frailty"

    @property
    def kendall_tau(self) -> float:
        return kendall_tau(self.shape)

    def linear_predictor(self, design: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(design, dtype=float)) @ self.coefficients

    def cumulative_baseline(self, times) -> np.ndarray:
        cumulative = np.concatenate(([0.0], np.cumsum(self.baseline_increments)))
        return cumulative[np.searchsorted(self.baseline_times, np.asarray(times, dtype=float), side="right")]

    def conditional_cumulative_hazard(self, design: np.ndarray, times) -> np.ndarray:
        """Λ(t | v, B=1), rows by times."""
        return np.outer(np.exp(self.linear_predictor(design)), self.cumulative_baseline(np.atleast_1d(times)))

    def frailty_mean(self, design: np.ndarray, times) -> np.ndarray:
        return posterior_frailty_mean(self.shape, self.conditional_cumulative_hazard(design, times))

    def survival(self, design: np.ndarray, times) -> np.ndarray:
        """Marginal survival (shape/(shape + Λ))^shape."""
        return laplace_survival(self.shape, self.conditional_cumulative_hazard(design, times))

    def hazard_increments(self, design: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Marginal hazard increments E[B | T >= u_k⁻] dΛ0(u_k) e^{β'v}.

        The posterior mean is taken at the left limit of each jump, so the increments are not
        exactly −d log of the marginal survival; survival itself always uses the closed form.
        """
        risk = np.exp(self.linear_predictor(design))
        cumulative_before = np.cumsum(self.baseline_increments) - self.baseline_increments
        left_limit = np.outer(risk, cumulative_before)
        increments = posterior_frailty_mean(self.shape, left_limit) * np.outer(risk, self.baseline_increments)
        return self.baseline_times, increments


def _cluster_totals(beta, times, increments, time, status, design, cluster, offset=None):
    """Per-cluster event count d_i and cumulative hazard H_i = Σ_j Λ0(U_ij) e^{η_ij}."""
    eta = design @ beta
    if offset is not None:
        eta = eta + offset
    cumulative = np.concatenate(([0.0], np.cumsum(increments)))
    cumhaz = cumulative[np.searchsorted(times, time, side="right")] * np.exp(eta)
    n_clusters = cluster.max() + 1
    return (
        np.bincount(cluster, weights=status, minlength=n_clusters),
        np.bincount(cluster, weights=cumhaz, minlength=n_clusters),
        eta,
    )


def _shape_terms(shape: float, deaths: np.ndarray, cumhaz: np.ndarray) -> float:
    """Shape-dependent part of the gamma-frailty marginal log-likelihood, summed over clusters."""
    return float(
        np.sum(
            -shape * np.log1p(cumhaz / shape)
            - deaths * np.log(shape + cumhaz)
            + gammaln(shape + deaths)
            - gammaln(shape)
        )
    )


def frailty_log_likelihood(
    shape: float,
    beta: np.ndarray,
    baseline_times: np.ndarray,
    baseline_increments: np.ndarray,
    time: np.ndarray,
    status: np.ndarray,
    design: np.ndarray,
    cluster: np.ndarray,
) -> float:
    """
    Observed-data log-likelihood with a discrete baseline:

    Σ δ (log dΛ0(U) + η) + Σ_i [θ log θ − (θ + d_i) log(θ + H_i) + log Γ(θ + d_i) − log Γ(θ)].
    """
    deaths, cumhaz, eta = _cluster_totals(beta, baseline_times, baseline_increments, time, status, design, cluster)
    events = status > 0
    jump_index = np.searchsorted(baseline_times, time[events])
    if np.any(jump_index >= len(baseline_times)) or np.any(baseline_times[jump_index] != time[events]):
        return -np.inf
    event_part = np.sum(np.log(baseline_increments[jump_index]) + eta[events])
    return float(event_part + _shape_terms(shape, deaths, cumhaz))


def fit_frailty(
    dataset: SurvivalDataset,
    arm: int,
    role: str,
    formula: ModelFormula,
    controls: FrailtyControls = FrailtyControls(),
) -> FrailtyFit:
    """Profile-likelihood fit of a gamma-frailty Cox model on one arm (status 1 − Δ for the censoring role)."""
    subset, status, design = _arm_arrays(dataset, arm, role, formula)
    _, cluster = np.unique(subset.cluster_index, return_inverse=True)
    n_clusters = cluster.max() + 1
    if n_clusters < 2:
        raise TooFewClusters(f"Arm {arm} has {n_clusters} cluster(s); the frailty model needs at least 2")
    return fit_frailty_arrays(subset.time, status, design, cluster, arm, role, formula, controls)


class _ProfilePoint(NamedTuple):
    shape: float
    beta: np.ndarray
    offset: np.ndarray
    times: np.ndarray
    increments: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool


def _profile_em(shape, beta, offset, time, status, design, cluster, controls) -> _ProfilePoint:
    """
    EM for (β, Λ0) at a fixed shape, started from ``beta`` and the log posterior means ``offset``.

    Stops once the marginal log-likelihood moves by at most ``tol`` relative to its size.
    """
    times, increments = breslow_increments(beta, time, status, design, offset)
    loglik = frailty_log_likelihood(shape, beta, times, increments, time, status, design, cluster)
    for iteration in range(1, controls.max_inner + 1):
        deaths, cumhaz, _ = _cluster_totals(beta, times, increments, time, status, design, cluster)
        offset = np.log((shape + deaths) / (shape + cumhaz))[cluster]
        beta, _, _, _ = newton_raphson(time, status, design, offset, controls.newton, beta_init=beta)
        times, increments = breslow_increments(beta, time, status, design, offset)
        new_loglik = frailty_log_likelihood(shape, beta, times, increments, time, status, design, cluster)
        if not np.isfinite(new_loglik):
            break
        change, loglik = abs(new_loglik - loglik), new_loglik
        if change <= controls.tol * (abs(loglik) + controls.tol):
            return _ProfilePoint(shape, beta, offset, times, increments, loglik, iteration, True)
    return _ProfilePoint(shape, beta, offset, times, increments, loglik, iteration, False)


def fit_frailty_arrays(
    time: np.ndarray,
    status: np.ndarray,
    design: np.ndarray,
    cluster: np.ndarray,
    arm: int,
    role: str,
    formula: ModelFormula,
    controls: FrailtyControls = FrailtyControls(),
) -> FrailtyFit:
    """
    Maximize the profile marginal log-likelihood over log shape, with (β, Λ0) from an inner EM.

    A profile within ``flat_tol`` of its value at the upper shape bound means no detectable
    frailty: the shape is set to the bound and a ThetaBoundaryWarning is raised.
    """
    lower, upper = controls.shape_bounds
    beta, _, _, _ = newton_raphson(time, status, design, controls=controls.newton)
    times, increments = breslow_increments(beta, time, status, design)

    sizes = np.bincount(cluster)
    if np.all(sizes == 1):
        # no within-cluster replication: frailty variance is not identified
        warnings.warn(
            f"Every {role} cluster in arm {arm} has one participant; frailty set to the upper bound",
            ThetaBoundaryWarning,
        )
        loglik = frailty_log_likelihood(upper, beta, times, increments, time, status, design, cluster)
        return FrailtyFit(arm, role, formula, beta, times, increments, upper, loglik, 0, at_boundary=True)

    # each profile evaluation warm-starts from the previous one
    last = _ProfilePoint(upper, beta, np.zeros(len(time)), times, increments, -np.inf, 0, False)
    best = last
    evaluations = []

    def profile(shape: float) -> _ProfilePoint:
        nonlocal last, best
        last = _profile_em(shape, last.beta, last.offset, time, status, design, cluster, controls)
        evaluations.append(last.iterations)
        if last.log_likelihood > best.log_likelihood:
            best = last
        logger.debug(
            "Frailty profile at shape=%.5g: ll=%.6f (%d EM iterations)", shape, last.log_likelihood, last.iterations
        )
        return last

    profile(float(np.clip(controls.shape_init, lower, upper)))
    minimize_scalar(
        lambda log_shape: -profile(float(np.exp(log_shape))).log_likelihood,
        bounds=(np.log(lower), np.log(upper)),
        method="bounded",
        options={"xatol": controls.shape_xatol},
    )
    at_upper = profile(upper)
    at_boundary = at_upper.log_likelihood >= best.log_likelihood - controls.flat_tol
    chosen = at_upper if at_boundary else best
    if at_boundary:
        warnings.warn(
            f"Frailty shape for the {role} model in arm {arm} reached the upper bound {upper:g}",
            ThetaBoundaryWarning,
        )
    if not chosen.converged:
        raise NonConvergence(
            f"Frailty EM at shape {chosen.shape:.5g} did not converge in {controls.max_inner} iterations "
            f"(arm {arm}, {role})"
        )
    logger.debug(
        "Frailty fit (arm %d, %s): shape=%.5g after %d profile evaluations", arm, role, chosen.shape, len(evaluations)
    )
    return FrailtyFit(
        arm,
        role,
        formula,
        chosen.beta,
        chosen.times,
        chosen.increments,
        chosen.shape,
        chosen.log_likelihood,
        sum(evaluations),
        at_boundary=at_boundary,
    )


def conditional_frailty_mean(fit: FrailtyFit, v, t):
    """E[B | T >= t] for a participant with design row ``v``."""
    return _scalar_or_array(fit.frailty_mean(np.atleast_2d(v), t)[0], t)


def marginal_event_survival(fit: FrailtyFit, v, t):
    _check_role(fit, "outcome")
    return _scalar_or_array(fit.survival(np.atleast_2d(v), t)[0], t)


def marginal_censoring_survival(fit: FrailtyFit, v, t):
    _check_role(fit, "censoring")
    return _scalar_or_array(fit.survival(np.atleast_2d(v), t)[0], t)


def marginal_censoring_hazard_increments(fit: FrailtyFit, v) -> tuple[np.ndarray, np.ndarray]:
    _check_role(fit, "censoring")
    times, increments = fit.hazard_increments(np.atleast_2d(v))
    return times, increments[0]
