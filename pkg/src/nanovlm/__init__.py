"""Desk-scale vision-language assistant for electron micrograph analysis."""

__version__ = "0.1.0"
