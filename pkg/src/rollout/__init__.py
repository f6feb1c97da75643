"""Optimal staggered-rollout designs, panel effect estimators and data-driven design search."""

__version__ = "0.1.0"
