"""Meta-learned frame scoring and keyshot summarization for video."""

__version__ = "0.1.0"
