"""Asynchronous federated bilevel black-box tuning of discrete prompts.

Prompt-fragment tokens and in-context demonstrations are modelled as
categorical distributions on probability simplices and tuned from loss
values alone.  Workers share a consensus over the fragment distributions
while keeping their demonstration distributions private; the lower-level
problem is folded into the upper level through cutting planes.
"""
from ._kernels import BACKEND
from .config import RunConfig, SimConfig, load_config
from .federated import GradientConfig, UpperConfig, decode_solution
from .lower import InnerConfig, estimate_phi
from .oracle import (
    ConstantEvaluator,
    DiscreteAssignment,
    EvaluatorSpec,
    ProblemShape,
    SeparableEvaluator,
    TableEvaluator,
    evaluator_from_spec,
    exact_expected_loss,
    exact_gradients,
    reinforce_gradients,
)
from .simnet import Simulation, run
from .simplex import project_to_simplex
from .trace import Trace

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConstantEvaluator",
    "DiscreteAssignment",
    "EvaluatorSpec",
    "GradientConfig",
    "InnerConfig",
    "ProblemShape",
    "RunConfig",
    "SeparableEvaluator",
    "SimConfig",
    "Simulation",
    "TableEvaluator",
    "Trace",
    "UpperConfig",
    "decode_solution",
    "estimate_phi",
    "evaluator_from_spec",
    "exact_expected_loss",
    "exact_gradients",
    "load_config",
    "project_to_simplex",
    "reinforce_gradients",
    "run",
]
