"""Uncertainty-filtered counterfactual explanations for molecular property regression."""

__version__ = "0.1.0"
