"""Dense eigendecomposition, PCA and finite-difference oracles.

Vectors and matrices are plain float64 numpy arrays. Everything here is a
pure function of its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from cagm.errors import NumericError, ValidationError

FD_GRAD_STEP = 1e-5
FD_HESS_STEP = 1e-3
MAX_EIGH_DIM = 512


def as_vector(x, name="vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValidationError(f"{name} must be a non-empty 1-d array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} has non-finite entries")
    return v


def as_matrix(a, name="matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValidationError(f"{name} must be a non-empty 2-d array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name} has non-finite entries")
    return m


def jacobi_eigh(a, max_sweeps: int = 100, tol: float = 1e-15):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and eigenvectors as the *columns* of the second array.
    """
    a = as_matrix(a, "A")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValidationError(f"A must be square, got {a.shape}")
    if n > MAX_EIGH_DIM:
        raise ValidationError(f"A is {n}x{n}; jacobi_eigh supports n <= {MAX_EIGH_DIM}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise ValidationError("A is not symmetric within 1e-10")

    a = 0.5 * (a + a.T)
    v = np.eye(n)
    frob = float(np.linalg.norm(a))
    off = 0.0
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * frob or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                with np.errstate(over="ignore"):  # a subnormal apq sends theta to inf, i.e. t = 0
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:  # theta^2 would overflow; t ~ 1 / (2 theta)
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise NumericError(
            f"jacobi_eigh did not converge in {max_sweeps} sweeps; off-diagonal residual {off:.3e}"
        )

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (n,)
    components: np.ndarray  # (k, n), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing

    @property
    def n_features(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def _fix_sign(vec: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    nz = np.flatnonzero(np.abs(vec) > eps)
    if nz.size and vec[nz[0]] < 0:
        return -vec
    return vec


def covariance(x) -> np.ndarray:
    """Sample covariance with 1/(m-1) normalization."""
    x = as_matrix(x, "X")
    centered = x - x.mean(axis=0)
    return centered.T @ centered / (x.shape[0] - 1)


def pca_fit(x, k: int) -> PcaModel:
    x = as_matrix(x, "X")
    m, n = x.shape
    if m < 2:
        raise ValidationError(f"pca_fit needs at least 2 rows, got {m}")
    if not 1 <= k <= min(m, n):
        raise ValidationError(f"k={k} must lie in [1, min(m, n)={min(m, n)}]")
    vals, vecs = jacobi_eigh(covariance(x))
    comps = np.stack([_fix_sign(vecs[:, i]) for i in range(k)])
    var = np.maximum(vals[:k], 0.0)
    return PcaModel(mean=x.mean(axis=0), components=comps, explained_variance=var)


def pca_project(model: PcaModel, x) -> np.ndarray:
    """``components @ (x - mean)``; accepts a single vector or rows of vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n_features:
        raise ValidationError(
            f"input has {x.shape[-1]} features, PCA model expects {model.n_features}"
        )
    return (x - model.mean) @ model.components.T


def pca_reconstruct(model: PcaModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.n_components:
        raise ValidationError(
            f"code has {z.shape[-1]} entries, PCA model has {model.n_components} components"
        )
    return z @ model.components + model.mean


def _eval(f, w, i):
    val = float(f(w))
    if not np.isfinite(val):
        raise NumericError(f"objective is non-finite while perturbing coordinate {i}")
    return val


def fd_gradient(f: Callable[[np.ndarray], float], w, h: float = FD_GRAD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValidationError("finite-difference step must be positive")
    w = np.array(w, dtype=np.float64)
    grad = np.empty_like(w)
    for i in range(w.size):
        orig = w[i]
        w[i] = orig + h
        fp = _eval(f, w, i)
        w[i] = orig - h
        fm = _eval(f, w, i)
        w[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def fd_hessian_diag(f: Callable[[np.ndarray], float], w, h: float = FD_HESS_STEP) -> np.ndarray:
    """Second central differences along each coordinate axis."""
    if h <= 0:
        raise ValidationError("finite-difference step must be positive")
    w = np.array(w, dtype=np.float64)
    f0 = _eval(f, w, -1)
    diag = np.empty_like(w)
    for i in range(w.size):
        orig = w[i]
        w[i] = orig + h
        fp = _eval(f, w, i)
        w[i] = orig - h
        fm = _eval(f, w, i)
        w[i] = orig
        diag[i] = (fp - 2.0 * f0 + fm) / (h * h)
    return diag
