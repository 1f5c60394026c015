"""Cross-silo federated learning of clinical risk models with differential privacy."""

from .estimators import FederatedRiskClassifier, RiskClassifier
from .experiments import ExperimentConfig, accountant_query, run_condition
from .models import ModelSpec, ParamVector
from .optim import DpConfig
from .privacy import AccountantParams, epsilon_for_training

__all__ = [
    "AccountantParams",
    "DpConfig",
    "ExperimentConfig",
    "FederatedRiskClassifier",
    "ModelSpec",
    "ParamVector",
    "RiskClassifier",
    "accountant_query",
    "epsilon_for_training",
    "run_condition",
]

__version__ = "0.1.0"
