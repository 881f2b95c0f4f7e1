"""Object detection as autoregressive token-sequence prediction."""

__version__ = "0.1.0"
