"""Bridges real imagery into the localization engine's feature containers."""

__version__ = "0.1.0"
