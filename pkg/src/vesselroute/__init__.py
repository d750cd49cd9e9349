"""Vessel-mask to graph pipeline with attention-scored route planning."""

__version__ = "0.1.0"
