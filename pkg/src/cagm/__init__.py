"""Context-aware gradient mapping: context-regularized SGD with curvature
diagnostics, plus a small experiment harness."""

from cagm.errors import NumericError, ValidationError

__version__ = "0.1.0"

__all__ = ["NumericError", "ValidationError", "__version__"]
