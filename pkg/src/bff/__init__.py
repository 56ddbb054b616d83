"""Multi-window contrastive risk models over tokenized event sequences."""

__version__ = "0.1.0"
