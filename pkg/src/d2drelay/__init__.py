"""Joint RB and power allocation for relay-aided D2D cellular networks."""

__version__ = "0.1.0"
