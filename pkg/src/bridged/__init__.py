"""Synthetic-data transfer learning: generation, style inversion, staged fine-tuning, LEEP."""

__version__ = "0.1.0"
