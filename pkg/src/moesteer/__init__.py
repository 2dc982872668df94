"""Surrogate-guided expert-circuit steering for mixture-of-experts routers."""

__version__ = "0.1.0"
