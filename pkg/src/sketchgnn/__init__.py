"""Training graph neural networks on count/tensor sketches of the graph."""

__version__ = "0.1.0"
