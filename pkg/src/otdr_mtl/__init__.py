"""OTDR reflective event detection with a multi-task LSTM."""

__version__ = "0.1.0"
