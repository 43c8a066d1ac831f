"""Transformer models for predicting non-response to EMA prompts."""

__version__ = "0.1.0"
