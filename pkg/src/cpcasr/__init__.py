"""Low-resource phoneme recognition with CPC features and a linear CTC probe."""

__version__ = "0.1.0"
