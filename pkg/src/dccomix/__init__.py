"""Discrete-code prosody transfer text-to-speech at desk scale."""

__version__ = "0.1.0"
