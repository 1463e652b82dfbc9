"""Numpy implementation of a lightweight multi-scale CNN with squeeze-and-excitation
for maize leaf disease classification: layers with analytic gradients, the network
and its ablations, a parameter/FLOP analyzer, data pipeline and training loop."""

from .model import ABLATIONS, CLASS_NAMES, Model, ModelConfig, build

__version__ = "0.1.0"
__all__ = ["ABLATIONS", "CLASS_NAMES", "Model", "ModelConfig", "build"]
