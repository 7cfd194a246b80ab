"""Deterministic hypothesis profile so verification runs are reproducible."""

from hypothesis import settings

settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")
