"""
Arm-specific working-independence Cox models for the outcome and censoring roles.

Ties follow the Breslow approximation. The baseline hazard is kept as discrete increments
at the event times of the fitted role, so every cumulative hazard is a finite sum.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data_model import ModelFormula, SurvivalDataset, build_design
from .errors import NoEventsInRole, NonConvergence, NoSubjectsInArm, RoleMismatch, SingularInformation

logger = logging.getLogger(__name__)

ROLES = ("outcome", "censoring")


@dataclass(frozen=True)
class FitControls:
    """Newton-Raphson settings shared by the marginal and frailty fitters."""

    gradient_tol: float = 1e-8
    step_tol: float = 1e-6
    max_iter: int = 50
    max_abs_coef: float = 50.0
    max_halvings: int = 30
    condition_limit: float = 1e12


@dataclass(frozen=True, eq=False)
class CoxFit:
    arm: int
    role: str
    formula: ModelFormula
    coefficients: np.ndarray
    baseline_times: np.ndarray
    baseline_increments: np.ndarray
    log_partial_likelihood: float
    iterations: int
    gradient_norm: float
    backend: str = "marginal_cox"

    def linear_predictor(self, design: np.ndarray) -> np.ndarray:
        design = np.atleast_2d(np.asarray(design, dtype=float))
        if design.shape[1] != len(self.coefficients):
            raise ValueError(
                f"Design has {design.shape[1]} columns, fit has {len(self.coefficients)} coefficients"
            )
        return design @ self.coefficients

    def cumulative_baseline(self, times) -> np.ndarray:
        """Right-continuous step sum of the baseline increments at ``times``."""
        cumulative = np.concatenate(([0.0], np.cumsum(self.baseline_increments)))
        return cumulative[np.searchsorted(self.baseline_times, np.asarray(times, dtype=float), side="right")]

    def cumulative_hazard(self, design: np.ndarray, times) -> np.ndarray:
        """Λ(t|v) for every design row (rows) and time (columns)."""
        risk = np.exp(self.linear_predictor(design))
        return np.outer(risk, self.cumulative_baseline(np.atleast_1d(times)))

    def survival(self, design: np.ndarray, times) -> np.ndarray:
        return np.exp(-self.cumulative_hazard(design, times))

    def hazard_increments(self, design: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Jump times u_k and per-row increments dΛ(u_k|v), shape (rows, K)."""
        risk = np.exp(self.linear_predictor(design))
        return self.baseline_times, np.outer(risk, self.baseline_increments)


def _risk_set_sums(
    time: np.ndarray, status: np.ndarray, design: np.ndarray, eta: np.ndarray, second_order: bool = True
):
    """
    Risk-set sums over {U >= t_k} at the distinct times t_k carrying at least one event.

    Returns (t_k, d_k, S0, S1, S2, shift); the weights are exp(η − shift).
    """
    time = np.asarray(time, dtype=float)
    status = np.asarray(status, dtype=float)
    n, p = design.shape
    uniq, inverse = np.unique(time, return_inverse=True)
    deaths = np.bincount(inverse, weights=status, minlength=len(uniq))
    has_event = deaths > 0
    event_times = uniq[has_event]
    deaths = deaths[has_event]

    shift = float(eta.max()) if n else 0.0
    order = np.argsort(-time, kind="stable")
    w = np.exp(eta[order] - shift)
    # last position (in descending order) still at risk at each event time
    at_risk = n - np.searchsorted(np.sort(time), event_times, side="left") - 1
    s0 = np.cumsum(w)[at_risk]
    s1 = np.zeros((len(event_times), p))
    s2 = np.zeros((len(event_times), p, p))
    if p:
        x = design[order]
        s1 = np.cumsum(w[:, None] * x, axis=0)[at_risk]
        if second_order:
            s2 = np.cumsum(w[:, None, None] * x[:, :, None] * x[:, None, :], axis=0)[at_risk]
    return event_times, deaths, s0, s1, s2, shift


def _as_design(design, n: int) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    return design.reshape(n, 1) if design.ndim == 1 else design


def partial_likelihood_derivatives(
    beta: np.ndarray,
    time: np.ndarray,
    status: np.ndarray,
    design: np.ndarray,
    offset: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Breslow log partial likelihood, score vector and observed information at ``beta``."""
    beta = np.asarray(beta, dtype=float)
    design = _as_design(design, len(time))
    status = np.asarray(status, dtype=float)
    eta = design @ beta
    if offset is not None:
        eta = eta + offset
    _, deaths, s0, s1, s2, shift = _risk_set_sums(time, status, design, eta)
    loglik = float(status @ eta - deaths @ (np.log(s0) + shift))
    mean_x = s1 / s0[:, None]
    score = status @ design - deaths @ mean_x
    information = np.einsum("k,kij->ij", deaths / s0, s2) - np.einsum("k,ki,kj->ij", deaths, mean_x, mean_x)
    return loglik, score, information


def breslow_increments(
    beta: np.ndarray,
    time: np.ndarray,
    status: np.ndarray,
    design: np.ndarray,
    offset: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Breslow baseline increments dΛ0(t_k) = d(t_k) / Σ_{U >= t_k} exp(η) at the role's event times."""
    design = _as_design(design, len(time))
    eta = design @ np.asarray(beta, dtype=float)
    if offset is not None:
        eta = eta + offset
    event_times, deaths, s0, _, _, shift = _risk_set_sums(time, status, design[:, :0], eta, second_order=False)
    return event_times, deaths * np.exp(-shift) / s0


def newton_raphson(
    time: np.ndarray,
    status: np.ndarray,
    design: np.ndarray,
    offset: np.ndarray | None = None,
    controls: FitControls = FitControls(),
    beta_init: np.ndarray | None = None,
) -> tuple[np.ndarray, float, int, float]:
    """
    Maximize the Breslow partial likelihood from beta_init (default 0) with step-halving.

    Converged when the score's sup-norm is within ``gradient_tol`` and the Newton step is
    within ``step_tol``. Returns (beta, log-likelihood, iterations, gradient norm).
    """
    p = design.shape[1]
    beta = np.zeros(p) if beta_init is None else np.asarray(beta_init, dtype=float).copy()
    loglik, score, information = partial_likelihood_derivatives(beta, time, status, design, offset)
    if p == 0:
        return beta, loglik, 0, 0.0

    for iteration in range(1, controls.max_iter + 1):
        try:
            condition = np.linalg.cond(information)
            if not np.isfinite(condition) or condition > controls.condition_limit:
                raise SingularInformation(
                    f"Information matrix is ill-conditioned (cond={condition:.3g}); check for collinear terms"
                )
            delta = linalg.solve(information, score, assume_a="sym")
        except linalg.LinAlgError as exc:
            raise SingularInformation(f"Information matrix is singular: {exc}") from exc

        gradient_norm = float(np.max(np.abs(score)))
        if gradient_norm <= controls.gradient_tol and np.max(np.abs(delta)) <= controls.step_tol:
            logger.debug("Cox converged after %d iterations (ll=%.6f, |g|=%.2e)", iteration - 1, loglik, gradient_norm)
            return beta, loglik, iteration - 1, gradient_norm

        step = 1.0
        for _ in range(controls.max_halvings):
            candidate = beta + step * delta
            cand_ll, cand_score, cand_info = partial_likelihood_derivatives(candidate, time, status, design, offset)
            if np.isfinite(cand_ll) and cand_ll >= loglik - 1e-12 * max(1.0, abs(loglik)):
                break
            step /= 2
        else:
            raise NonConvergence(f"Step-halving failed to increase the partial likelihood at iteration {iteration}")

        beta, loglik, score, information = candidate, cand_ll, cand_score, cand_info
        logger.debug("Iteration %d: ll=%.6f, |g|=%.2e, step=%.4f", iteration, loglik, np.max(np.abs(score)), step)
        if np.max(np.abs(beta)) > controls.max_abs_coef:
            raise NonConvergence(
                f"Coefficient diverged (|beta|={np.max(np.abs(beta)):.1f}); likely monotone likelihood / separation"
            )

    raise NonConvergence(f"Newton-Raphson did not converge in {controls.max_iter} iterations")


def _arm_arrays(dataset: SurvivalDataset, arm: int, role: str, formula: ModelFormula):
    if role not in ROLES:
        raise RoleMismatch(f"Unknown role '{role}'")
    subset = dataset.subset_arm(arm)
    if subset.n_subjects == 0:
        raise NoSubjectsInArm(f"Arm {arm} has no participants")
    status = subset.role_indicator(role)
    if status.sum() == 0:
        kind = "events" if role == "outcome" else "censorings"
        raise NoEventsInRole(f"Arm {arm} has no observed {kind} to fit the {role} model")
    design = build_design(dataset, formula)[subset.mask]
    return subset, status, design


def fit_cox(
    dataset: SurvivalDataset,
    arm: int,
    role: str,
    formula: ModelFormula,
    controls: FitControls = FitControls(),
    offset: np.ndarray | None = None,
) -> CoxFit:
    """Fit a Breslow-ties Cox model on the participants of ``arm`` (status 1 − Δ for censoring)."""
    subset, status, design = _arm_arrays(dataset, arm, role, formula)
    return fit_cox_arrays(subset.time, status, design, arm, role, formula, controls, offset)


def fit_cox_arrays(
    time: np.ndarray,
    status: np.ndarray,
    design: np.ndarray,
    arm: int,
    role: str,
    formula: ModelFormula,
    controls: FitControls = FitControls(),
    offset: np.ndarray | None = None,
    beta_init: np.ndarray | None = None,
) -> CoxFit:
    beta, loglik, iterations, gradient_norm = newton_raphson(time, status, design, offset, controls, beta_init)
    times, increments = breslow_increments(beta, time, status, design, offset)
    return CoxFit(
        arm=arm,
        role=role,
        formula=formula,
        coefficients=beta,
        baseline_times=times,
        baseline_increments=increments,
        log_partial_likelihood=loglik,
        iterations=iterations,
        gradient_norm=gradient_norm,
    )


def fit_nelson_aalen(dataset: SurvivalDataset, arm: int, role: str) -> CoxFit:
    """Covariate-free fit: increments are d(t)/Y(t)."""
    return fit_cox(dataset, arm, role, ModelFormula((), role))


def _check_role(fit, role: str) -> None:
    if fit.role != role:
        raise RoleMismatch(f"Expected a {role} model, got a {fit.role} model")


def _scalar_or_array(values: np.ndarray, t):
    return float(values[0]) if np.ndim(t) == 0 else values


def predict_event_survival(fit: CoxFit, v, t):
    """P(T >= t | v) = exp(−Λ0(t) exp(β'v))."""
    _check_role(fit, "outcome")
    return _scalar_or_array(fit.survival(np.atleast_2d(v), t)[0], t)


def predict_censoring_survival(fit: CoxFit, v, t):
    """K_c(t | v) = exp(−H0(t) exp(α'v))."""
    _check_role(fit, "censoring")
    return _scalar_or_array(fit.survival(np.atleast_2d(v), t)[0], t)


def censoring_hazard_increments(fit: CoxFit, v) -> tuple[np.ndarray, np.ndarray]:
    _check_role(fit, "censoring")
    times, increments = fit.hazard_increments(np.atleast_2d(v))
    return times, increments[0]
