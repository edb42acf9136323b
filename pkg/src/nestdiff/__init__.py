"""Nested diffusion ensembles over intermediate transformer representations."""

__version__ = "0.1.0"
