"""VAE training with convergence diagnostics and smoothness-constant calculators."""

__version__ = "0.1.0"
