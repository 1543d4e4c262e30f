"""Conditional flow-matching policies with segment-consistency training, in pure numpy."""

__version__ = "0.1.0"
