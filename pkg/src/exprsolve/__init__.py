"""Closed-form PDE solving by policy-gradient search over expression trees."""

__version__ = "0.1.0"
