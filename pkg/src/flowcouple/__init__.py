"""Desk-scale flow matching with local Gaussian noise coupling and a content
consistency loss, alongside independent, minibatch-OT and reflow baselines."""

__version__ = "0.1.0"
