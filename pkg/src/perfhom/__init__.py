"""Homogenization of an elliptic problem in a two-phase perforated domain with nonlinear Robin conditions."""

__version__ = "0.1.0"
