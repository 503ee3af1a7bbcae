"""Experiment harness: configuration, drivers, SVG plots and the ``asgdlab`` CLI."""

from .cli import main

__all__ = ["main"]
