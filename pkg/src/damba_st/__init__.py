"""Multi-domain spatio-temporal forecasting with selective state space models."""

from .data import DomainSpec, default_corpus, generate_domain, load_dataset, prepare_domain, tiny_corpus
from .model import DambaST, ModelConfig
from .ssm import ContractError, SelectiveSSM, discretize_zoh, ssm_scan_parallel, ssm_scan_sequential
from .training import ObjectiveConfig, TrainConfig, TrainState, evaluate, fit

__version__ = "0.1.0"

__all__ = ["ContractError", "DambaST", "DomainSpec", "ModelConfig", "ObjectiveConfig", "SelectiveSSM",
           "TrainConfig", "TrainState", "default_corpus", "discretize_zoh", "evaluate", "fit",
           "generate_domain", "load_dataset", "prepare_domain", "ssm_scan_parallel",
           "ssm_scan_sequential", "tiny_corpus"]
