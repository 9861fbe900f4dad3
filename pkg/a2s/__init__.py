"""Cross-modal audio / sheet-music snippet retrieval and piece identification."""

__version__ = "1.0.0"
