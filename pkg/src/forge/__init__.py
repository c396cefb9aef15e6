"""Differentiable architecture, channel and precision search."""
from .cost import CostError, CostRule, CostSpec, combine_costs, get_cost, register_cost
from .data import Dataset, Split, generate_dataset, get_dataset
from .estimators import SearchClassifier
from .experiment import ConfigError, ExperimentConfig, ParetoRecord, pipeline, sweep
from .graph import Graph, GraphError, Node, build_graph, infer_shapes, load_graph, save_graph
from .model import SearchModel
from .mps import MPS
from .pit import PIT
from .supernet import SuperNet
from .tensor import Tensor, check_mode, no_grad
from .train import TrainConfig, evaluate, train_search

__version__ = "0.1.0"

__all__ = [
    "CostError", "CostRule", "CostSpec", "combine_costs", "get_cost", "register_cost",
    "Dataset", "Split", "generate_dataset", "get_dataset", "SearchClassifier",
    "ConfigError", "ExperimentConfig", "ParetoRecord", "pipeline", "sweep",
    "Graph", "GraphError", "Node", "build_graph", "infer_shapes", "load_graph", "save_graph",
    "SearchModel", "MPS", "PIT", "SuperNet", "Tensor", "check_mode", "no_grad",
    "TrainConfig", "evaluate", "train_search",
]
