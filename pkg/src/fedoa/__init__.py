"""Federated tuning of low-rank adapters with feature-distance personalization."""

from .data import EnvSpec, FederationLayout, build_benchmark, make_layout
from .errors import ConfigError, DegenerateInputError, DivergenceError, NumericError, ShapeError
from .metrics import RunReport, Theorem4Inputs, estimate_theorem4_inputs
from .nn import FixedHead, FrozenEncoder, LoraAdapter, ModelParts, build_model
from .protocol import FedConfig, run_experiment, theorem4_stepsizes
from .regularizers import RegSpec

__version__ = "0.1.0"
