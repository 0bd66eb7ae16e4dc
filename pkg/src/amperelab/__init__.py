"""Numerical laboratory for Monge-Ampere section geometry and Hessian integrability."""

__version__ = "0.1.0"
