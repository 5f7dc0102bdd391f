"""Numerical laboratory for Margulis leaf measures, entropy estimators, and
the maximal-entropy dichotomy on a cat-map suspension."""

from . import errors, model

__version__ = "0.1.0"

__all__ = ["errors", "model", "__version__"]
