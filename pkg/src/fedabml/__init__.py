"""Federated amortized Bayesian meta-learning with mean-field Gaussian networks."""

__version__ = "0.1.0"

from .bnn import ModelSpec, elbo_loss, forward, nll
from .fedcore import FedConfig, FederatedTask, Mode, client_update, personalize, run_training, server_round
from .varinf import AggregationStrategy, MeanFieldGaussian, aggregate, kl_diag, sample

__all__ = [
    "__version__",
    "AggregationStrategy",
    "FedConfig",
    "FederatedTask",
    "MeanFieldGaussian",
    "Mode",
    "ModelSpec",
    "aggregate",
    "client_update",
    "elbo_loss",
    "forward",
    "kl_diag",
    "nll",
    "personalize",
    "run_training",
    "sample",
    "server_round",
]
