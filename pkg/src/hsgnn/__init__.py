"""Heterogeneous similarity graph neural network for EHR-style graphs."""
from .hetgraph import GraphError, HeteroGraph, Schema, default_features, load_graph, read_graph_dir, write_graph
from .metapath import MetaPath, MetaPathError, PathCountOverflow, SimilaritySubgraph, build_subgraphs, path_count
from .fusion import ConfigError, FusedGraph, HSGNNNetwork, ModelConfig, NumericalError
from .training import TrainConfig, grad_check, train
from .estimator import GraphData, HSGNNClassifier, SimilarityGraphBuilder
from .quickinfer import TestBatch, quick_infer

__version__ = "0.1.0"
