"""Error-aware interaction engine: detect robot errors from human social signals."""

__version__ = "0.1.0"
