import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from crtsurv.data_model import SurvivalDataset
from crtsurv.errors import ConfigError
from crtsurv.nonparam import (
    SurvivalCurve,
    fit_km_model,
    kaplan_meier_curve,
    product_limit,
    standardize_outcome_model,
    weighted_km,
)


def classical_km(time, event, at):
    survival = 1.0
    for t in np.unique(time[event == 1]):
        if t > at:
            break
        survival *= 1.0 - np.sum((time == t) & (event == 1)) / np.sum(time >= t)
    return survival


@pytest.fixture
def size_one_and_three():
    frame = pd.DataFrame(
        {
            "cluster_id": ["A", "B", "B", "B", "C", "D"],
            "time": [1.0, 2.0, 3.0, 4.0, 1.0, 2.0],
            "event": [1, 1, 0, 1, 1, 0],
            "arm": [1, 1, 1, 1, 0, 0],
            "Z1": [0.0, 1.0, 2.0, 3.0, 0.5, 0.5],
        }
    )
    return SurvivalDataset.from_frame(frame)


class ConstantRows:
    """Outcome oracle returning one fixed prediction per participant."""

    def __init__(self, predictions):
        self.predictions = np.asarray(predictions, dtype=float)

    def event_survival(self, dataset, times):
        return np.tile(self.predictions[:, None], (1, len(times)))


class TestKaplanMeier:

    def test_no_censoring(self):
        curve = kaplan_meier_curve(np.array([1.0, 2.0]), np.array([1.0, 1.0]))
        npt.assert_allclose(curve.evaluate([1.0, 2.0]), [0.5, 0.0])

    def test_all_censored(self):
        curve = kaplan_meier_curve(np.array([1.0, 2.0, 3.0]), np.zeros(3))
        npt.assert_allclose(curve.evaluate([0.0, 1.5, 10.0]), 1.0)

    def test_right_continuous_steps(self):
        curve = kaplan_meier_curve(np.array([1.0, 2.0, 3.0, 4.0]), np.array([1.0, 0.0, 1.0, 1.0]))
        npt.assert_allclose(curve.evaluate([0.999, 1.0, 2.5, 3.0]), [1.0, 0.75, 0.75, 0.375])
        assert curve.is_monotone
        assert curve.in_unit_interval

    def test_inverse_size_weights(self, size_one_and_three):
        curve = weighted_km(size_one_and_three, 1, "cluster_inverse_size")
        npt.assert_allclose(curve.evaluate([1.0, 2.0, 3.5, 4.0]), [0.5, 1 / 3, 1 / 3, 0.0], atol=1e-12)

    def test_equal_weights(self, size_one_and_three):
        curve = weighted_km(size_one_and_three, 1, "equal")
        npt.assert_allclose(curve.evaluate([1.0, 2.0, 4.0]), [0.75, 0.5, 0.0], atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_equal_weights_is_classical_km(self, seed):
        rng = np.random.default_rng(seed)
        time = np.round(rng.exponential(size=30), 1)
        event = rng.binomial(1, 0.6, size=30).astype(float)
        curve = kaplan_meier_curve(time, event, np.ones(30))
        for at in np.linspace(0, time.max(), 17):
            npt.assert_allclose(curve.evaluate(at), classical_km(time, event, at), atol=1e-14)

    def test_bad_weighting(self, size_one_and_three):
        with pytest.raises(ConfigError):
            weighted_km(size_one_and_three, 1, "median")

    def test_matches_lifelines(self, toy):
        lifelines = pytest.importorskip("lifelines")
        subset = toy.subset_arm(0)
        reference = lifelines.KaplanMeierFitter().fit(subset.time, subset.event)
        at = np.linspace(0, 2.5, 11)
        npt.assert_allclose(
            weighted_km(toy, 0).evaluate(at),
            reference.survival_function_at_times(at).to_numpy(),
            atol=1e-12,
        )


class TestKaplanMeierModel:

    def test_rows_share_the_curve(self, size_one_and_three):
        model = fit_km_model(size_one_and_three, 1, "outcome")
        survival = model.survival(np.zeros((3, 0)), [1.0, 4.0])
        assert survival.shape == (3, 2)
        npt.assert_allclose(survival, [[0.75, 0.0]] * 3)

    def test_censoring_increments(self, size_one_and_three):
        model = fit_km_model(size_one_and_three, 1, "censoring")
        times, increments = model.hazard_increments(np.zeros((2, 0)))
        npt.assert_allclose(times, [3.0])
        npt.assert_allclose(increments, [[0.5], [0.5]])

    def test_product_limit_pieces(self):
        times, d, y = product_limit(np.array([1.0, 1.0, 2.0, 3.0]), np.array([1.0, 0.0, 0.0, 1.0]))
        npt.assert_allclose(times, [1.0, 3.0])
        npt.assert_allclose(d, [1.0, 1.0])
        npt.assert_allclose(y, [4.0, 1.0])


class TestStandardization:

    def test_constant_prediction(self, toy):
        oracle = ConstantRows(np.full(toy.n_subjects, 0.7))
        for level in ("cluster", "individual"):
            npt.assert_allclose(standardize_outcome_model(oracle, toy, level, 1.0), 0.7)

    def test_sizes_one_and_three(self):
        frame = pd.DataFrame(
            {
                "cluster_id": ["A", "B", "B", "B"],
                "time": [1.0, 2.0, 3.0, 4.0],
                "event": [1, 1, 0, 1],
                "arm": [1, 0, 0, 0],
                "Z1": [0.0, 1.0, 2.0, 3.0],
            }
        )
        ds = SurvivalDataset.from_frame(frame)
        oracle = ConstantRows([0.4, 0.8, 0.8, 0.8])
        npt.assert_allclose(standardize_outcome_model(oracle, ds, "cluster", 1.0), 0.6)
        npt.assert_allclose(standardize_outcome_model(oracle, ds, "individual", 1.0), 0.7)

    def test_matches_direct_resummation(self, toy):
        rng = np.random.default_rng(4)
        predictions = rng.uniform(size=toy.n_subjects)
        oracle = ConstantRows(predictions)
        by_cluster = [predictions[s].mean() for s in toy.cluster_slices]
        npt.assert_allclose(standardize_outcome_model(oracle, toy, "cluster", [0.5, 1.0]), [np.mean(by_cluster)] * 2)
        npt.assert_allclose(standardize_outcome_model(oracle, toy, "individual", 0.5), predictions.mean())


class TestSurvivalCurve:

    def test_before_first_point(self):
        curve = SurvivalCurve(np.array([0.5, 1.0]), np.array([0.9, 0.8]))
        assert curve.evaluate(0.1) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            SurvivalCurve(np.array([0.0, 1.0]), np.array([1.0]))
