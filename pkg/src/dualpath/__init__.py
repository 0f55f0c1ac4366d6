"""Dual-path (content + emotion) video-to-music retrieval."""

__version__ = "0.1.0"
