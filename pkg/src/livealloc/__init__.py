"""Live-stream allocation agent: differentiable core, feed simulator,
grouped actor-critic, off-policy evaluation, and an experiment CLI."""

__version__ = "0.1.0"
