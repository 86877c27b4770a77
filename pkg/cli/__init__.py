"""Command-line entry point: ``python -m cli.main <command>``."""

__version__ = "0.1.0"
