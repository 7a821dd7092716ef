"""Queue-length estimation on signalized grid networks: shockwave baseline and graph-attention seq2seq model."""

__version__ = "0.1.0"
