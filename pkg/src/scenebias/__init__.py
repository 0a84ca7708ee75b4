"""Scene-debiased action representation learning on synthetic biased video."""

__version__ = "0.1.0"
