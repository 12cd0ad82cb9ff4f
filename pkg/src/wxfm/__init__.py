"""Desk-scale weather/climate foundation model: data, masking, model, training, heads, evaluation."""
__version__ = "0.1.0"
