"""Ensembling, merging, and routing of low-rank adapter experts over a tiny
frozen causal language model, with a synthetic multi-task harness that
compares every fusion mode under one evaluation protocol."""

__version__ = "0.1.0"
