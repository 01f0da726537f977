"""Structured-supervision pretraining of a small vision transformer against a frozen teacher."""

__version__ = "0.1.0"
