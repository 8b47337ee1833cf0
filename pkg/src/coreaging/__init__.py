"""Aging-aware CPU core management simulator for LLM inference clusters."""

__version__ = "0.1.0"
