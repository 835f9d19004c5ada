"""Orthography-aware text classification for Arabic-script languages."""

__version__ = "0.1.0"

from .orthography import LanguageId  # noqa: F401
