"""Minimal reverse-mode autodiff over numpy arrays for small CNN classifiers."""

from .graph import (
    INPUT,
    GradientSet,
    Graph,
    GraphBuilder,
    Node,
    forward,
    input_gradient,
    loss_and_backward,
)
from .ops import softmax_cross_entropy

__all__ = [
    "INPUT",
    "GradientSet",
    "Graph",
    "GraphBuilder",
    "Node",
    "forward",
    "input_gradient",
    "loss_and_backward",
    "softmax_cross_entropy",
]
