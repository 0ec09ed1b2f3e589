"""Confidence-guided copy-based decoding and its baselines over a small
autoregressive model contract, plus a retrieval/evaluation harness."""

__version__ = "0.1.0"
