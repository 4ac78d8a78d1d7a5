"""Muscle-state regression from paired ultrasound-like images."""

__version__ = "0.1.0"
