"""Redy: an SLO-driven remote memory cache over a batched queue-pair transport."""
__version__ = "0.1.0"
