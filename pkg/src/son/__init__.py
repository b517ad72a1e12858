"""Desk-scale NFV service programming and orchestration platform."""

__version__ = "0.1.0"
