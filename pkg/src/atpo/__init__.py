"""Uncertainty-gated tree rollouts and visit-normalised policy optimisation for
multi-turn information-seeking dialogue, on a synthetic hidden-facts task."""

__version__ = "0.1.0"
