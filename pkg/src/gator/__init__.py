"""Learned structured channel pruning with stochastic hard gates."""
from gator.ir import IRError, NetworkGraph, count_flops, count_params, parse_network
from gator.builtin import builtin_graph

__version__ = "0.1.0"

__all__ = ["IRError", "NetworkGraph", "builtin_graph", "count_flops", "count_params", "parse_network"]
