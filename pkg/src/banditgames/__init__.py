"""Uncoupled bandit learning in zero-sum matrix games with last-iterate guarantees."""

__version__ = "0.1.0"
