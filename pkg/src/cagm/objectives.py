"""Closed-form objectives with known derivatives.

They expose the same ``loss``/``grad`` surface as
:class:`cagm.models.ModelObjective`, so optimizer and metric code can be
checked against hand-computed values.
"""

from __future__ import annotations

import numpy as np


class Quadratic:
    """``0.5 * w^T diag(h) w + c^T w``; Hessian is ``diag(h)``."""

    def __init__(self, hess_diag, linear=None):
        self.hess = np.asarray(hess_diag, dtype=np.float64)
        self.lin = np.zeros_like(self.hess) if linear is None else np.asarray(linear, dtype=np.float64)
        self.dim = self.hess.size

    def loss(self, w):
        w = np.asarray(w, dtype=np.float64)
        return float(0.5 * np.dot(w * self.hess, w) + np.dot(self.lin, w))

    def grad(self, w):
        return self.hess * np.asarray(w, dtype=np.float64) + self.lin


class Linear:
    """``c^T w + b``: zero curvature everywhere."""

    def __init__(self, coef, offset=0.0):
        self.coef = np.asarray(coef, dtype=np.float64)
        self.offset = float(offset)
        self.dim = self.coef.size

    def loss(self, w):
        return float(np.dot(self.coef, w) + self.offset)

    def grad(self, w):
        return self.coef.copy()


class Quartic:
    """``sum(w_i^4)``; Hessian diagonal ``12 w_i^2``."""

    def __init__(self, dim=1):
        self.dim = dim

    def loss(self, w):
        w = np.asarray(w, dtype=np.float64)
        return float(np.sum(w**4))

    def grad(self, w):
        return 4.0 * np.asarray(w, dtype=np.float64) ** 3
