"""Plackett-Luce decision-order optimization for sequential multi-agent policies."""

__version__ = "0.1.0"
