"""Simulation study: plans, the replication worker pool and metric tables."""

__all__ = ["harness", "metrics", "models"]
