"""Flow-based non-equilibrium importance sampling for normalizing constants."""

__version__ = "0.1.0"
