"""Benchmark construction, hierarchical reward scoring, preference-data
preparation, OCR-based evaluation, and a pairwise human-study service for
visual text rendering models."""

__version__ = "0.1.0"
