"""Unpaired cross-lingual captioning pipeline on a synthetic bilingual world."""

__version__ = "0.1.0"
