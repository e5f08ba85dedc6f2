"""Analytic Markov models and a slot-level simulator for freshness-oriented multiple access."""

__version__ = "0.1.0"
