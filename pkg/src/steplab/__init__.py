"""Step-level labeling, calibration, and best-of-K evaluation for
chain-of-thought reasoning traces."""

__version__ = "0.1.0"
