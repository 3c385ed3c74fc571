"""Synthetic-scene detection task for end-to-end distillation runs."""
