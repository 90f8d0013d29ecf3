"""Domain-adaptive object detection for adverse weather, at toy scale."""

__version__ = "0.1.0"
