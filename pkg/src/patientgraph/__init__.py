"""Similarity-built patient graphs and a hybrid GCN/GraphSAGE/GAT risk model."""

__version__ = "0.1.0"
