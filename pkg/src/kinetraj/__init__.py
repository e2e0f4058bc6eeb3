"""Hybrid trajectory prediction: learned action decoders driving CV/CTRA motion models."""

__version__ = "0.1.0"
