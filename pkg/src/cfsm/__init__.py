"""Common factorised space model for disjoint-label-space transfer learning."""

from .errors import (CFSMError, ConfigError, ContractError, DataError, DimensionError, FormatError,
                     NumericError)
from .experiment import ExperimentConfig, load_config, prepare_data, run_experiment, run_pretrain
from .graph import GraphSpec
from .losses import LossWeights, auto_balance
from .model import ArchSpec, ModelParams, load_checkpoint, save_checkpoint
from .scenario import Scenario, ScenarioKind, Variant

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "CFSMError", "ConfigError", "ContractError", "DataError", "DimensionError",
    "ExperimentConfig", "FormatError", "GraphSpec", "LossWeights", "ModelParams", "NumericError",
    "Scenario", "ScenarioKind", "Variant", "auto_balance", "load_checkpoint", "load_config",
    "prepare_data", "run_experiment", "run_pretrain", "save_checkpoint", "__version__",
]
