"""Synthetic stream generation, the toy detector, and experiment drivers."""

from owlab.harness import detector, experiment, generator, training

__all__ = ["detector", "experiment", "generator", "training"]
