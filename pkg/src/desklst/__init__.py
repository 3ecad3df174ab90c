"""Desk-scale speech translation cascade: speech frontend, length adapter, decoder-only backend."""

__version__ = "0.1.0"
