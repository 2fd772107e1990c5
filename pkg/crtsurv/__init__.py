"""Doubly robust survival estimands for cluster-randomized trials."""

from .aipwcc import EstimandReport, PropensitySpec, build_oracle, estimate
from .data_model import DatasetSchema, ModelFormula, SurvivalDataset, load_csv, save_csv
from .inference import jackknife, jackknife_estimates
from .simlab import ScenarioSpec, example_dataset, generate, mc_truth, run_study, scenario
from .strategies import EstimatorPipeline, Strategy, strategy_catalog

__all__ = [
    "DatasetSchema",
    "EstimandReport",
    "EstimatorPipeline",
    "ModelFormula",
    "PropensitySpec",
    "ScenarioSpec",
    "Strategy",
    "SurvivalDataset",
    "build_oracle",
    "estimate",
    "example_dataset",
    "generate",
    "jackknife",
    "jackknife_estimates",
    "load_csv",
    "mc_truth",
    "run_study",
    "save_csv",
    "scenario",
    "strategy_catalog",
]
