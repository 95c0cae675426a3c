"""Concept recommendation pipeline: data, graph, text, adapter, tracing, recommender."""

__version__ = "0.1.0"
