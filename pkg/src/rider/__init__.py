"""rider: weighted empirical risk minimization under random temporal distribution shift."""

__all__ = ["__version__"]

# Keep version in sync with pyproject.toml
__version__ = "0.1.0"
