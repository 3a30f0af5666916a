"""Recurrent video restoration transformer at desk scale."""

__version__ = "0.1.0"
