"""Estimation engine: data tables, likelihood and ML/REML fits, posterior
sampling, bridge-sampled evidence, model selection/averaging and the
async orchestrator that fits a model space."""

__all__ = [
    "analysis",
    "averaging",
    "config",
    "data",
    "evidence",
    "likelihood",
    "models",
    "orchestrator",
    "sampler",
]
