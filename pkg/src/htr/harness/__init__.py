"""Experiment orchestration: configuration, training loop, metrics, plots and CLI."""
