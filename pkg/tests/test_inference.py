import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest
from scipy import stats

from crtsurv.data_model import ModelFormula, SurvivalDataset
from crtsurv.errors import LeaveOneOutInfeasible, TooFewClusters
from crtsurv.inference import (
    check_leave_one_out,
    covariance_matrix,
    jackknife,
    jackknife_estimates,
    summarize_replicates,
    t_quantile,
)
from crtsurv.strategies import EstimatorPipeline, select_strategies

FORMULA = ModelFormula.parse("Z1 + W1")


def km_pipeline(report_times=(1.0,)):
    return EstimatorPipeline(select_strategies(["KM"], FORMULA)[0], report_times=report_times)


def effect_rows(estimate=0.5):
    return pd.DataFrame(
        {
            "level": ["cluster"] * 3,
            "quantity": ["S1", "S0", "SPCE"],
            "time": [1.0] * 3,
            "estimate": [0.6, 0.1, estimate],
        }
    )


class TestTQuantile:

    @pytest.mark.parametrize("df", [1, 2, 5, 24, 48, 200])
    @pytest.mark.parametrize("p", [0.6, 0.9, 0.975, 0.995, 0.025])
    def test_matches_scipy(self, p, df):
        npt.assert_allclose(t_quantile(p, df), stats.t.ppf(p, df), rtol=1e-8)

    def test_published_value(self):
        npt.assert_allclose(t_quantile(0.975, 24), 2.0639, atol=1e-4)

    def test_median(self):
        assert t_quantile(0.5, 7) == 0.0

    @pytest.mark.parametrize("p, df", [(0.0, 5), (1.0, 5), (0.9, 0)])
    def test_out_of_range(self, p, df):
        with pytest.raises(ValueError):
            t_quantile(p, df)


class TestCovariance:

    def test_three_replicates(self):
        sigma = covariance_matrix([0.4, 0.5, 0.6])
        npt.assert_allclose(sigma, [[0.02 * 2 / 3]], rtol=1e-12)
        npt.assert_allclose(np.sqrt(sigma[0, 0]), 0.11547, atol=1e-5)

    def test_symmetric(self):
        replicates = np.random.default_rng(1).normal(size=(20, 2))
        sigma = covariance_matrix(replicates)
        npt.assert_allclose(sigma, sigma.T)
        npt.assert_allclose(sigma, np.cov(replicates, rowvar=False) * 19 * 19 / 20, rtol=1e-12)

    def test_permutation_invariant(self):
        replicates = np.random.default_rng(2).normal(size=(15, 4))
        shuffled = replicates[np.random.default_rng(3).permutation(15)]
        npt.assert_allclose(covariance_matrix(replicates), covariance_matrix(shuffled), atol=1e-12)

    def test_scaling(self):
        replicates = np.random.default_rng(4).normal(size=(15, 3))
        npt.assert_allclose(covariance_matrix(-3 * replicates), 9 * covariance_matrix(replicates), rtol=1e-12)


class TestSummarize:

    def test_identical_replicates(self):
        result = summarize_replicates(effect_rows(), np.tile([0.6, 0.1, 0.5], (5, 1)))
        npt.assert_allclose(result.targets["se"], 0.0)
        npt.assert_allclose(result.targets["lower"], result.targets["estimate"])
        npt.assert_allclose(result.targets["upper"], result.targets["estimate"])

    def test_effect_variance_uses_contrast(self):
        rng = np.random.default_rng(5)
        arms = rng.normal(size=(26, 2))
        replicates = np.column_stack([arms, arms[:, 0] - arms[:, 1] + rng.normal(scale=0.1, size=26)])
        result = summarize_replicates(effect_rows(), replicates)
        sigma = covariance_matrix(arms)
        npt.assert_allclose(result.targets["se"].iloc[2], np.sqrt(sigma[0, 0] + sigma[1, 1] - 2 * sigma[0, 1]))
        npt.assert_allclose(result.covariances[("cluster", "SPCE", 1.0)], sigma)
        assert result.df == 24
        half_width = result.targets["upper"].iloc[2] - 0.5
        npt.assert_allclose(half_width, t_quantile(0.975, 24) * result.targets["se"].iloc[2])

    def test_ratio_scale_keeps_direct_variance(self):
        rng = np.random.default_rng(6)
        replicates = rng.normal(size=(10, 3))
        result = summarize_replicates(effect_rows(), replicates, scale="ratio")
        npt.assert_allclose(result.targets["se"].iloc[2], np.sqrt(covariance_matrix(replicates[:, 2])[0, 0]))

    def test_scaling_targets_scales_se(self):
        replicates = np.random.default_rng(7).normal(size=(10, 3))
        base = summarize_replicates(effect_rows(), replicates).targets["se"]
        scaled = summarize_replicates(effect_rows(), 2.5 * replicates).targets["se"]
        npt.assert_allclose(scaled, 2.5 * base, rtol=1e-12)

    def test_two_replicates(self):
        with pytest.raises(TooFewClusters):
            summarize_replicates(effect_rows(), np.ones((2, 3)))


class TestJackknife:

    def test_km_replicates_are_leave_one_out_fits(self, toy):
        pipeline = km_pipeline()
        result = jackknife(toy, pipeline)
        assert result.replicates.shape == (12, len(pipeline(toy).estimates))
        npt.assert_allclose(result.replicates[3], pipeline(toy.drop_cluster(3)).target_vector())
        assert result.df == 10

    def test_cluster_order_does_not_matter(self, toy_frame):
        order = toy_frame["cluster_id"].unique()[::-1]
        reordered = pd.concat([toy_frame[toy_frame["cluster_id"] == c] for c in order])
        first = jackknife(SurvivalDataset.from_frame(toy_frame), km_pipeline())
        second = jackknife(SurvivalDataset.from_frame(reordered), km_pipeline())
        npt.assert_allclose(first.targets["se"], second.targets["se"], atol=1e-12)

    def test_parallel_matches_serial(self, toy):
        serial = jackknife(toy, km_pipeline())
        parallel = jackknife(toy, km_pipeline(), n_jobs=2)
        npt.assert_array_equal(serial.replicates, parallel.replicates)

    def test_estimates_carry_interval_columns(self, toy):
        report = jackknife_estimates(toy, km_pipeline(), alpha=0.1)
        assert report.has_inference
        assert report.header["df"] == 10
        assert report.header["alpha"] == 0.1
        assert np.all(report.estimates["lower"] <= report.estimates["upper"])

    def test_marginal_aipwcc_runs(self, toy):
        pipeline = EstimatorPipeline(select_strategies(["marginal-o1c1"], FORMULA)[0], report_times=(1.0,))
        result = jackknife(toy, pipeline)
        assert np.all(np.isfinite(result.targets["se"]))

    def test_needs_three_clusters(self):
        frame = pd.DataFrame(
            {
                "cluster_id": ["a", "a", "b", "b"],
                "time": [1.0, 2.0, 1.5, 0.5],
                "event": [1, 0, 0, 1],
                "arm": [1, 1, 0, 0],
                "Z1": [0.1, 0.2, 0.3, 0.4],
            }
        )
        with pytest.raises(TooFewClusters):
            jackknife(SurvivalDataset.from_frame(frame), km_pipeline())


class TestInfeasible:

    @pytest.fixture
    def fragile(self):
        frame = pd.DataFrame(
            {
                "cluster_id": ["A", "A", "B", "B", "C", "C", "D", "D", "E", "E"],
                "time": [1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 2.0, 3.0, 1.5, 2.5],
                "event": [1, 0, 1, 1, 1, 0, 1, 0, 1, 0],
                "arm": [1, 1, 1, 1, 0, 0, 0, 0, 0, 0],
                "Z1": np.linspace(-1, 1, 10),
            }
        )
        return SurvivalDataset.from_frame(frame)

    def test_dropping_only_censored_cluster(self, fragile):
        pipeline = EstimatorPipeline(select_strategies(["marginal-o1c1"], ModelFormula.parse("Z1"))[0], report_times=(1.0,))
        with pytest.raises(LeaveOneOutInfeasible) as info:
            check_leave_one_out(fragile, pipeline)
        assert info.value.cluster_label == "A"
        assert info.value.exit_code == 4

    def test_jackknife_aborts(self, fragile):
        pipeline = EstimatorPipeline(select_strategies(["marginal-o1c1"], ModelFormula.parse("Z1"))[0], report_times=(1.0,))
        with pytest.raises(LeaveOneOutInfeasible):
            jackknife(fragile, pipeline)
