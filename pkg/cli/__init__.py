"""Command-line front end: run configuration, bundle writer and report renderer."""

__all__ = ["config", "main", "report"]
