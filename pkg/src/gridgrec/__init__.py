"""Synthetic supervision for dialogue-based generalized referring expression comprehension."""

__version__ = "0.1.0"
