"""
Leave-one-cluster-out jackknife with full nuisance refits, and t(M − 2) confidence intervals.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import betaincinv

from .aipwcc import EstimandReport
from .data_model import SurvivalDataset
from .errors import LeaveOneOutInfeasible, TooFewClusters, ValidationError
from .strategies import EstimatorPipeline

logger = logging.getLogger(__name__)

EFFECT_PAIRS = {"SPCE": ("S1", "S0"), "RMST": ("RMST1", "RMST0")}


def t_quantile(p: float, df: float) -> float:
    """Student-t inverse CDF from the regularized incomplete beta: P(|T| > t) = I_{df/(df+t²)}(df/2, 1/2)."""
    if df <= 0:
        raise ValueError(f"Degrees of freedom must be positive, got {df}")
    if not 0 < p < 1:
        raise ValueError(f"Probability must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    tail = 2.0 * min(p, 1.0 - p)
    x = betaincinv(df / 2.0, 0.5, tail)
    t = float(np.sqrt(df * (1.0 - x) / x))
    return t if p > 0.5 else -t


def covariance_matrix(replicates) -> np.ndarray:
    """((M − 1)/M) Σ_g (x_g − x̄)(x_g − x̄)ᵀ, centered at the replicate mean."""
    x = np.asarray(replicates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    m = x.shape[0]
    centered = x - x.mean(axis=0)
    return (m - 1) / m * centered.T @ centered


@dataclass(frozen=True, eq=False)
class JackknifeResult:
    """
    Replicates (M rows, one column per report row) with the derived SE and CI per target.

    ``covariances`` maps (level, effect, time) to the 2×2 arm covariance (arm 1, arm 0).
    """

    replicates: np.ndarray
    targets: pd.DataFrame
    covariances: dict
    alpha: float

    @property
    def n_clusters(self) -> int:
        return self.replicates.shape[0]

    @property
    def df(self) -> int:
        return self.n_clusters - 2


def _replicate(pipeline: EstimatorPipeline, dataset: SurvivalDataset, g: int) -> np.ndarray:
    label = dataset.cluster_labels[g]
    try:
        subset = dataset.drop_cluster(g)
        return pipeline(subset).target_vector()
    except ValidationError as exc:
        raise LeaveOneOutInfeasible(label, str(exc)) from exc


def check_leave_one_out(dataset: SurvivalDataset, pipeline: EstimatorPipeline) -> None:
    """Abort with the offending cluster if any replicate dataset cannot be fitted."""
    if dataset.n_clusters < 3:
        raise TooFewClusters(f"The jackknife needs at least 3 clusters, found {dataset.n_clusters}")
    for g, label in enumerate(dataset.cluster_labels):
        try:
            pipeline.check_feasible(dataset.drop_cluster(g))
        except ValidationError as exc:
            raise LeaveOneOutInfeasible(label, str(exc)) from exc


def summarize_replicates(
    estimates: pd.DataFrame, replicates: np.ndarray, scale: str = "difference", alpha: float = 0.05
) -> JackknifeResult:
    """SE and t(M − 2) interval for every report row from the replicate matrix."""
    m = replicates.shape[0]
    if m < 3:
        raise TooFewClusters(f"The jackknife needs at least 3 clusters, found {m}")
    df = m - 2
    crit = t_quantile(1.0 - alpha / 2.0, df)
    index = {
        (row.level, row.quantity, round(float(row.time), 12)): i
        for i, row in enumerate(estimates.itertuples(index=False))
    }
    variance = np.diag(covariance_matrix(replicates)).copy()
    covariances = {}
    for (level, quantity, time), i in index.items():
        if quantity not in EFFECT_PAIRS:
            continue
        pair = [index[(level, q, time)] for q in EFFECT_PAIRS[quantity]]
        sigma = covariance_matrix(replicates[:, pair])
        covariances[(level, quantity, time)] = sigma
        if scale == "difference":
            contrast = np.array([1.0, -1.0])
            variance[i] = contrast @ sigma @ contrast
    se = np.sqrt(np.clip(variance, 0.0, None))
    targets = estimates.copy()
    targets["se"] = se
    targets["lower"] = targets["estimate"] - crit * se
    targets["upper"] = targets["estimate"] + crit * se
    return JackknifeResult(replicates, targets, covariances, alpha)


def jackknife(
    dataset: SurvivalDataset,
    pipeline: EstimatorPipeline,
    alpha: float = 0.05,
    n_jobs: int = 1,
    point: EstimandReport | None = None,
) -> JackknifeResult:
    """
    Refit the whole pipeline with each cluster left out; replicates are reduced in cluster order.

    Callers passing ``point`` are expected to have run ``check_leave_one_out`` first.
    """
    m = dataset.n_clusters
    if m < 3:
        raise TooFewClusters(f"The jackknife needs at least 3 clusters, found {m}")
    if point is None:
        check_leave_one_out(dataset, pipeline)
        point = pipeline(dataset)
    logger.info("Jackknife: %d leave-one-cluster-out refits (%s)", m, pipeline.strategy.name)
    rows = Parallel(n_jobs=n_jobs)(delayed(_replicate)(pipeline, dataset, g) for g in range(m))
    return summarize_replicates(point.estimates, np.vstack(rows), pipeline.scale, alpha)


def jackknife_estimates(
    dataset: SurvivalDataset,
    pipeline: EstimatorPipeline,
    alpha: float = 0.05,
    n_jobs: int = 1,
) -> EstimandReport:
    """Point report with se/lower/upper columns attached."""
    check_leave_one_out(dataset, pipeline)
    point = pipeline(dataset)
    result = jackknife(dataset, pipeline, alpha, n_jobs, point)
    header = dict(point.header, df=result.df, alpha=alpha)
    return replace(point, estimates=result.targets, header=header)
