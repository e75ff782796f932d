"""Data-quality-aware chance-constrained OPF for radial distribution feeders."""

__version__ = "0.1.0"
