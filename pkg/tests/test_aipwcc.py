import numpy as np
import numpy.testing as npt
import pytest
from scipy.integrate import trapezoid

from crtsurv import simlab
from crtsurv.aipwcc import (
    ConditionalSurvivalOracle,
    ContributionMatrix,
    PropensitySpec,
    build_oracle,
    contribution_matrix,
    effect_rmst,
    effect_spce,
    estimate,
    estimate_survival,
    evaluation_grid,
    rmst_from_curve,
    subject_contribution,
)
from crtsurv.cox_frailty import laplace_survival
from crtsurv.data_model import ModelFormula, SurvivalDataset, aggregate_by_level
from crtsurv.errors import (
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
from crtsurv.nonparam import SurvivalCurve

FORMULA = ModelFormula(("Z1", "W1"))


class StubModel:
    """Covariate-free survival model with a fixed curve and fixed hazard jumps."""

    def __init__(self, arm, role, survival_fn, jump_times=(), jumps=()):
        self.arm = arm
        self.role = role
        self.survival_fn = survival_fn
        self.jump_times = np.asarray(jump_times, dtype=float)
        self.jumps = np.asarray(jumps, dtype=float)

    def survival(self, design, times):
        rows = np.atleast_2d(design).shape[0]
        return np.tile(self.survival_fn(np.atleast_1d(np.asarray(times, dtype=float))), (rows, 1))

    def hazard_increments(self, design):
        rows = np.atleast_2d(design).shape[0]
        return self.jump_times, np.tile(self.jumps, (rows, 1))


def stub_oracle(arm, censoring_fn=lambda t: np.ones_like(t), jump_times=(), jumps=()):
    return ConditionalSurvivalOracle(
        arm,
        "km",
        StubModel(arm, "outcome", lambda t: np.exp(-t)),
        StubModel(arm, "censoring", censoring_fn, jump_times, jumps),
    )


@pytest.fixture
def oracles(toy):
    return {a: build_oracle(toy, a, "marginal", FORMULA) for a in (1, 0)}


class TestSubjectContribution:

    def test_uncensored_in_arm(self):
        value = subject_contribution(2.0, 1, True, 0.5, 1.0, lambda t: 0.8, lambda t: 1.0)
        npt.assert_allclose(value, 1.2)

    def test_other_arm(self):
        value = subject_contribution(2.0, 1, False, 0.5, 1.0, lambda t: 0.8, lambda t: 1.0)
        npt.assert_allclose(value, 0.8)

    def test_censored_before_t(self):
        survival = {1.0: 0.8, 2.0: 0.6}
        censoring = {1.0: 0.9, 2.0: 0.9}
        value = subject_contribution(
            1.0, 0, True, 0.5, 2.0, survival.get, censoring.get, jump_times=[1.0], jump_sizes=[0.2]
        )
        # 0 − 0.6 + 0.6 · (0.8 / (0.9 · 0.8)) / 0.5
        npt.assert_allclose(value, 0.733333, rtol=1e-6)

    def test_matches_contribution_matrix(self, toy, oracles):
        grid = evaluation_grid(toy, report_times=(0.5, 1.0, 2.0))
        propensity = PropensitySpec(0.5)
        for a, oracle in oracles.items():
            matrix = contribution_matrix(toy, oracle, propensity, grid)
            jump_times, jump_sizes = oracle.censoring_hazard_increments(toy)
            in_arm = toy.arm_mask(a)
            for i in np.concatenate((np.flatnonzero(in_arm)[:8], np.flatnonzero(~in_arm)[:3])):
                rows = [i]

                def event_survival(t, rows=rows):
                    return float(oracle.event_survival(toy, [t], rows)[0, 0])

                def censoring_survival(t, rows=rows):
                    return float(oracle.censoring_survival(toy, [t], rows)[0, 0])

                for k in (1, len(grid) // 2, len(grid) - 1):
                    expected = subject_contribution(
                        toy.time[i],
                        toy.event[i],
                        bool(in_arm[i]),
                        propensity.pi(a),
                        grid[k],
                        event_survival,
                        censoring_survival,
                        jump_times,
                        jump_sizes[i],
                    )
                    npt.assert_allclose(matrix.values[i, k], expected, rtol=1e-10, atol=1e-12)


class TestContributionMatrix:

    def test_floor_counts_truncations(self, toy):
        oracle = stub_oracle(1, censoring_fn=lambda t: np.where(t > 1.0, 1e-10, 1.0))
        matrix = contribution_matrix(toy, oracle, PropensitySpec(0.5), np.array([0.0, 0.5, 2.0]))
        assert matrix.n_truncated == int(toy.arm_mask(1).sum())
        assert np.all(np.isfinite(matrix.values))

    def test_strict_floor_raises(self, toy):
        oracle = stub_oracle(1, censoring_fn=lambda t: np.where(t > 1.0, 1e-10, 1.0))
        with pytest.raises(CensoringSurvivalUnderflow):
            contribution_matrix(toy, oracle, PropensitySpec(0.5), np.array([0.0, 2.0]), strict_floor=True)

    def test_no_censoring_model_is_ipw(self, toy):
        matrix = contribution_matrix(toy, stub_oracle(1), PropensitySpec(0.5), np.array([0.0, 1.0]))
        in_arm = toy.arm_mask(1)
        expected = np.where(in_arm, (toy.time >= 1.0) / 0.5 - np.exp(-1.0), np.exp(-1.0))
        npt.assert_allclose(matrix.values[:, 1], expected)
        npt.assert_allclose(matrix.values[:, 0], 1.0)

    def test_zero_survival_drops_integrand(self, toy):
        oracle = ConditionalSurvivalOracle(
            1,
            "km",
            StubModel(1, "outcome", lambda t: np.where(t >= 0.5, 0.0, 1.0)),
            StubModel(1, "censoring", lambda t: np.ones_like(t), [0.5, 1.0], [0.1, 0.1]),
        )
        matrix = contribution_matrix(toy, oracle, PropensitySpec(0.5), np.array([0.0, 1.0]))
        assert np.all(np.isfinite(matrix.values))

    @pytest.mark.parametrize("grid", [[0.5, 1.0], [0.0, 1.0, 1.0], [], [[0.0, 1.0]]])
    def test_invalid_grid(self, toy, grid):
        with pytest.raises(InvalidGrid):
            contribution_matrix(toy, stub_oracle(1), PropensitySpec(0.5), grid)

    def test_oracle_arm_mismatch(self):
        with pytest.raises(OracleArmMismatch):
            ConditionalSurvivalOracle(1, "km", StubModel(0, "outcome", np.exp), None)

    def test_oracle_role_mismatch(self):
        with pytest.raises(RoleMismatch):
            ConditionalSurvivalOracle(1, "km", StubModel(1, "censoring", np.exp), None)

    def test_estimate_survival_checks_keys(self, toy):
        with pytest.raises(OracleArmMismatch):
            estimate_survival(toy, {0: stub_oracle(1)}, PropensitySpec(), "cluster", [0.0, 1.0])

    def test_estimate_survival_bad_level(self, toy):
        with pytest.raises(ConfigError):
            estimate_survival(toy, {1: stub_oracle(1)}, PropensitySpec(), "site", [0.0, 1.0])

    def test_invalid_propensity(self):
        for pi in (0.0, 1.0, -0.2):
            with pytest.raises(InvalidPropensity):
                PropensitySpec(pi)


class TestAggregation:

    def test_two_clusters(self):
        matrix = ContributionMatrix(1, np.array([0.0]), np.array([[1.0], [0.0], [1.0], [1.0], [0.0]]))
        npt.assert_allclose(matrix.aggregate(np.array([2, 3]), "cluster").values, [0.583333], rtol=1e-6)
        npt.assert_allclose(matrix.aggregate(np.array([2, 3]), "individual").values, [0.6])

    def test_equal_cluster_sizes_collapse(self, toy_frame):
        frame = toy_frame.groupby("cluster_id", sort=False).head(3)
        ds = SurvivalDataset.from_frame(frame)
        oracles = {a: build_oracle(ds, a, "km", ModelFormula()) for a in (1, 0)}
        report = estimate(ds, oracles, report_times=(0.5, 1.0), taus=(1.5,))
        cluster = report.estimates[report.estimates["level"] == "cluster"]["estimate"].to_numpy()
        individual = report.estimates[report.estimates["level"] == "individual"]["estimate"].to_numpy()
        npt.assert_allclose(cluster, individual, atol=1e-12)


class TestEffects:

    def test_spce_difference(self):
        curves = (SurvivalCurve([0.0, 1.0], [1.0, 0.544]), SurvivalCurve([0.0, 1.0], [1.0, 0.711]))
        npt.assert_allclose(effect_spce(curves, "difference", 1.0), -0.167)

    def test_spce_ratio(self):
        curves = (SurvivalCurve([0.0, 1.0], [1.0, 0.5]), SurvivalCurve([0.0, 1.0], [1.0, 0.5]))
        assert effect_spce(curves, "ratio", 1.0) == 1.0

    def test_ratio_zero_denominator(self):
        curves = (SurvivalCurve([0.0, 1.0], [1.0, 0.3]), SurvivalCurve([0.0, 1.0], [1.0, 0.0]))
        with pytest.raises(RatioDenominatorZero):
            effect_spce(curves, "ratio", 1.0)

    def test_unknown_scale(self):
        curves = (SurvivalCurve([0.0], [1.0]), SurvivalCurve([0.0], [1.0]))
        with pytest.raises(ConfigError):
            effect_spce(curves, "odds", 0.0)


class TestRmst:

    def test_rectangle(self):
        assert rmst_from_curve(SurvivalCurve([0.0, 1.0], [1.0, 1.0]), 1.0) == 1.0

    def test_triangle(self):
        npt.assert_allclose(rmst_from_curve(SurvivalCurve([0.0, 0.5, 1.0], [1.0, 0.5, 0.0]), 1.0), 0.5)

    def test_exponential(self):
        grid = np.arange(0, 1001) * 0.001
        npt.assert_allclose(rmst_from_curve(SurvivalCurve(grid, np.exp(-grid)), 1.0), 1 - np.exp(-1), atol=1e-4)

    def test_tau_between_grid_points(self):
        curve = SurvivalCurve([0.0, 1.0, 2.0], [1.0, 0.5, 0.25])
        npt.assert_allclose(rmst_from_curve(curve, 1.5), 1.0)

    def test_tau_beyond_grid_extends(self):
        curve = SurvivalCurve([0.0, 1.0], [1.0, 0.5])
        with pytest.warns(TauExtrapolationWarning):
            npt.assert_allclose(rmst_from_curve(curve, 2.0), 1.25)

    def test_tau_beyond_grid_strict(self):
        with pytest.raises(TauBeyondGrid):
            rmst_from_curve(SurvivalCurve([0.0, 1.0], [1.0, 0.5]), 2.0, extrapolate=False)


class TestEffectRmst:

    @pytest.fixture
    def matrices(self):
        rng = np.random.default_rng(8)
        grid = np.concatenate(([0.0], np.sort(rng.uniform(0, 3, size=25))))
        values = rng.uniform(-0.2, 1.2, size=(2, 14, len(grid)))
        return ContributionMatrix(1, grid, values[0]), ContributionMatrix(0, grid, values[1])

    def test_identical_arms(self, matrices):
        arm1, _ = matrices
        sizes = np.array([3, 5, 6])
        assert effect_rmst(arm1, arm1, sizes, 1.0, "cluster") == 0.0

    def test_bounds(self):
        grid = np.array([0.0, 0.5, 1.0, 2.0])
        ones = ContributionMatrix(1, grid, np.ones((4, 4)))
        zeros = ContributionMatrix(0, grid, np.zeros((4, 4)))
        npt.assert_allclose(effect_rmst(ones, zeros, np.array([1, 3]), 1.5, "individual"), 1.5)

    @pytest.mark.parametrize("level", ["cluster", "individual"])
    @pytest.mark.parametrize("tau", [0.7, 2.0])
    def test_linearity(self, matrices, level, tau):
        arm1, arm0 = matrices
        sizes = np.array([3, 5, 6])
        per_arm = [rmst_from_curve(m.aggregate(sizes, level), tau) for m in (arm1, arm0)]
        npt.assert_allclose(effect_rmst(arm1, arm0, sizes, tau, level), per_arm[0] - per_arm[1], atol=1e-12)

    def test_ratio_scale(self, matrices):
        arm1, arm0 = matrices
        sizes = np.array([3, 5, 6])
        per_arm = [rmst_from_curve(m.aggregate(sizes, "cluster"), 1.0) for m in (arm1, arm0)]
        npt.assert_allclose(effect_rmst(arm1, arm0, sizes, 1.0, "cluster", "ratio"), per_arm[0] / per_arm[1])

    def test_grids_must_match(self, matrices):
        arm1, arm0 = matrices
        shifted = ContributionMatrix(0, arm0.grid * 2, arm0.values)
        with pytest.raises(InvalidGrid):
            effect_rmst(arm1, shifted, np.array([3, 5, 6]), 1.0, "cluster")


class TestEstimate:

    def test_grid_contents(self, toy):
        grid = evaluation_grid(toy, report_times=(1.0,), taus=(2.0,))
        events = np.unique(toy.time[toy.event == 1])
        assert grid[0] == 0.0
        assert {1.0, 2.0} <= set(grid)
        assert set(events[events <= 2.0]) <= set(grid)
        assert grid[-1] == 2.0

    def test_grid_without_requests(self, toy):
        grid = evaluation_grid(toy)
        npt.assert_array_equal(grid, np.concatenate(([0.0], np.unique(toy.time[toy.event == 1]))))

    def test_rmst_equals_trapezoid_of_curve(self, toy, oracles):
        report = estimate(toy, oracles, report_times=(1.0,), taus=(0.8, 1.6))
        for level in ("cluster", "individual"):
            for a, quantity in ((1, "RMST1"), (0, "RMST0")):
                curve = report.curves[(level, a)]
                for tau in (0.8, 1.6):
                    keep = curve.grid <= tau
                    expected = trapezoid(curve.values[keep], curve.grid[keep])
                    npt.assert_allclose(report.value(level, quantity, tau), expected, atol=1e-12)

    def test_rmst_equals_aggregate_of_subject_trapezoids(self, toy, oracles):
        report = estimate(toy, oracles, taus=(1.6,))
        grid = evaluation_grid(toy, taus=(1.6,))
        matrix = contribution_matrix(toy, oracles[1], PropensitySpec(), grid)
        per_subject = trapezoid(matrix.values, grid, axis=1)
        for level in ("cluster", "individual"):
            npt.assert_allclose(
                report.value(level, "RMST1", 1.6),
                aggregate_by_level(per_subject, toy.cluster_sizes, level),
                atol=1e-12,
            )

    def test_report_rows(self, toy, oracles):
        report = estimate(toy, oracles, report_times=(0.5, 1.0), taus=(1.0,))
        assert len(report.estimates) == 2 * (2 * 3 + 3)
        assert not report.has_inference
        spce = report.value("cluster", "SPCE", 1.0)
        npt.assert_allclose(spce, report.value("cluster", "S1", 1.0) - report.value("cluster", "S0", 1.0))
        assert report.diagnostics["n_truncated"] >= 0
        with pytest.raises(KeyError):
            report.value("cluster", "SPCE", 9.0)

    def test_single_level(self, toy, oracles):
        report = estimate(toy, oracles, report_times=(1.0,), levels=("individual",))
        assert set(report.estimates["level"]) == {"individual"}


class GeneratorModel:
    """Frailty-integrated exponential hazards of the simulator on rows Q = (W1, W2, Z1, Z2, Z1·Z2, N/50)."""

    def __init__(self, spec, arm, role, jump_times):
        self.spec = spec
        self.arm = arm
        self.role = role
        self.jump_times = np.asarray(jump_times, dtype=float)
        if role == "censoring":
            self.shape = spec.censoring_frailty_shape
        else:
            self.shape = spec.frailty_shape_treated if arm == 1 else spec.frailty_shape_control

    def _rate(self, design):
        design = np.atleast_2d(design)
        if self.role == "censoring":
            size_scale = design[:, 5] / 2.0 if self.spec.censoring_size_scale else 1.0
            return self.spec.delta0 * size_scale * np.exp(design @ np.asarray(self.spec.alpha))
        return simlab._event_rate(self.spec, self.arm, design[:, 5] * 50.0, design @ np.asarray(self.spec.beta))

    def survival(self, design, times):
        return laplace_survival(self.shape, np.outer(self._rate(design), np.atleast_1d(times)))

    def hazard_increments(self, design):
        cumulative = -np.log(self.survival(design, self.jump_times))
        return self.jump_times, np.diff(cumulative, axis=1, prepend=0.0)


class TestKnownNuisance:

    def test_mean_contribution_matches_truth(self):
        spec = simlab.scenario("1", n_clusters=150)
        dataset = simlab.generate(spec, seed=(77, 0))
        truth = simlab.mc_truth(spec, n_clusters=4000, report_times=(0.5, 1.0), use_cache=False)
        grid = np.array([0.0, 0.5, 1.0])
        formula = spec.outcome_model
        sizes = dataset.cluster_sizes
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        for a in (1, 0):
            # every observed time in the arm is a jump, so the compensator is exact at min(t, U)
            in_arm = dataset.arm_mask(a)
            jump_times = np.union1d(dataset.time[in_arm & (dataset.time <= grid[-1])], grid[1:])
            oracle = ConditionalSurvivalOracle(
                a,
                "frailty",
                GeneratorModel(spec, a, "outcome", jump_times),
                GeneratorModel(spec, a, "censoring", jump_times),
                formula,
                formula.with_role("censoring"),
            )
            totals = np.add.reduceat(contribution_matrix(dataset, oracle, PropensitySpec(spec.pi1), grid).values, starts)
            for k, t in ((1, 0.5), (2, 1.0)):
                cluster_means = totals[:, k] / sizes
                individual = totals[:, k].sum() / sizes.sum()
                observed = {
                    "cluster": (cluster_means.mean(), cluster_means.std(ddof=1) / np.sqrt(len(sizes))),
                    "individual": (individual, np.sqrt(np.sum((totals[:, k] - individual * sizes) ** 2)) / sizes.sum()),
                }
                for level, (value, se) in observed.items():
                    target = truth.value(level, f"S{a}", t)
                    assert abs(value - target) <= 4 * np.hypot(se, truth.mc_se(level, f"S{a}", t))
