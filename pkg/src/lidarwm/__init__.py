"""Generative LiDAR world model with a synthetic world and evaluation suite."""

__version__ = "0.1.0"
