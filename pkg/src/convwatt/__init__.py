"""Analytical energy/bandwidth modeling and weight-clustering compression
for CNN inference on an output-stationary accelerator."""

__version__ = "0.1.0"
