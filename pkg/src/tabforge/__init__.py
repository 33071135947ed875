"""tabforge: desk-scale pipeline for table-native language models."""

__version__ = "0.1.0"
