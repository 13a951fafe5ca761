"""Rate-adaptive single-pixel imaging and sensing with weight-ranked learned patterns."""

__version__ = "0.1.0"
