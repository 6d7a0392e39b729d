"""fmbench: frozen-backbone adaptation and evaluation harness for CT/MR tasks."""

__version__ = "0.1.0"
