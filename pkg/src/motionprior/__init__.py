"""Motion prior with sensor adapters for human motion capture."""

__version__ = "0.1.0"
