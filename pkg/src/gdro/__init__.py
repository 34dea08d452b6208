"""Primal-dual Group DRO for learning a single neuron under label noise."""

from gdro.activations import ActivationSpec, leaky_relu, parse_activation, relu
from gdro.divergence import DivergencePenalty
from gdro.data import GeneratorConfig, GroupDataset
from gdro.solver import SolverConfig, run

__all__ = [
    "ActivationSpec",
    "DivergencePenalty",
    "GeneratorConfig",
    "GroupDataset",
    "SolverConfig",
    "leaky_relu",
    "parse_activation",
    "relu",
    "run",
]

__version__ = "0.1.0"
