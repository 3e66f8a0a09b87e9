"""Graph-attention stock ranking: data pipeline, model, training and evaluation."""

__version__ = "0.1.0"
