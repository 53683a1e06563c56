"""Synthetic data, metrics, configuration and experiment orchestration."""
