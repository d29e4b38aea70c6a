"""Multi-agent actor-critic training with knowledge reuse from teacher policies."""

__version__ = "0.1.0"
