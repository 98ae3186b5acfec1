"""Continuous-time user preference modelling for temporal sets prediction."""

__version__ = "0.1.0"
