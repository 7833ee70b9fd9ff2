"""Adversarial training laboratory with dynamic perturbation adaptation."""

__version__ = "0.1.0"
