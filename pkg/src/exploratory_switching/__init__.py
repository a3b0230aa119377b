"""Exploratory (entropy-regularised) optimal switching: reference solvers, simulator and learner."""

__version__ = "0.1.0"
