"""Multi-domain teacher-student training on synthetic speech-like corpora."""

__version__ = "0.1.0"
