"""NLOS RF target localization: centralized and distributed EM from TDOA/AOA."""

from .model import (
    MeasurementSet,
    Node,
    Problem,
    ScattererSupport,
    Scenario,
    default_five_node_scenario,
    load_scenario,
    make_random_scenario,
    path_length,
    steering_vector,
    synthesize_measurements,
    wedge_contains,
)
from .likelihood import ParamEstimate, StatisticPair, observed_loglik_K

__version__ = "0.1.0"

__all__ = [
    "MeasurementSet",
    "Node",
    "ParamEstimate",
    "Problem",
    "ScattererSupport",
    "Scenario",
    "StatisticPair",
    "default_five_node_scenario",
    "load_scenario",
    "make_random_scenario",
    "observed_loglik_K",
    "path_length",
    "steering_vector",
    "synthesize_measurements",
    "wedge_contains",
    "__version__",
]
