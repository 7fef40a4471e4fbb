"""Joint token-merging and channel-pruning compression for vision transformers."""

__version__ = "0.1.0"
