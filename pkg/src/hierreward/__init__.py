"""Threshold-gated hierarchical rewards for policy optimization, at desk scale."""

__version__ = "0.1.0"
