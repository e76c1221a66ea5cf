"""Executable model of a speculative out-of-order processor with secrecy tracking."""

__version__ = "0.1.0"
