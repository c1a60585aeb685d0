"""Goal-based vehicle trajectory prediction with a discrete choice model fused into an attention LSTM."""

__version__ = "0.1.0"
