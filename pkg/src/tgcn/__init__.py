"""Tensor-graph convolutional networks for semi-supervised node classification."""

from .errors import FormatError, NumericError, StructuralError, TGCNError, ValidationError
from .data_io import Dataset, load_dataset, load_model, make_splits, save_dataset, save_model
from .graph_core import TensorGraph, build_propagation_set, sparse_from_edges
from .metrics import accuracy, macro_f1
from .model import ModelConfig, ModelParams, forward, init_params
from .training import TrainConfig, train

__version__ = "0.1.0"
