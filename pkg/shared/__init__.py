"""Model-core package: domain types, errors, link/IRR/prior maths and random streams."""

__all__ = ["errors", "models", "reliability", "streams"]
