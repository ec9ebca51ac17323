"""Decentralised multi-agent informative path planning with diffusion policies."""

__version__ = "0.1.0"
