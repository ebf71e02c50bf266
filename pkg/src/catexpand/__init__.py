"""Multilinear expansion of shallow classifiers over categorical inputs."""

__version__ = "0.1.0"
