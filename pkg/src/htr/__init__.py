"""Hindsight task relabeling for off-policy meta-RL on sparse-reward goal reaching."""

__version__ = "0.1.0"
