"""Dynamic relevance learning for few-shot classification of region features."""

__version__ = "0.1.0"
