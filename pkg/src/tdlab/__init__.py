"""Temporal-difference policy evaluation with linear features: exact solutions,
TD(0), averaged TD(0) and centered TD, plus their finite-sample bound constants."""

from tdlab.algos import CtdParams, StepSchedule, run_estimator
from tdlab.chain import MarkovRewardProcess, mixing_profile, random_mrp, stationary_distribution
from tdlab.geometry import FeatureMap, build_system, projected_value_iteration

__all__ = [
    "CtdParams",
    "FeatureMap",
    "MarkovRewardProcess",
    "StepSchedule",
    "build_system",
    "mixing_profile",
    "projected_value_iteration",
    "random_mrp",
    "run_estimator",
    "stationary_distribution",
]
