"""Aligned image tokenizer + decoder-only generator, desk-scale edition."""


class AliTokError(Exception):
    """Base class for every error raised by the pipeline."""
