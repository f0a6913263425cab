"""Context embeddings and their alignment with parameter space.

Targets come from PCA projections of the input features; a small
regression MLP (the embedding net) learns to reproduce them, and its
output is the per-input context vector. Parameters are mapped into the
same space by a fixed orthonormal projection, and the alignment penalty
measures the squared distance between the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cagm import models
from cagm.errors import NumericError, ValidationError
from cagm.linalg import PcaModel, pca_fit, pca_project

MANIFOLD_MODES = ("orthonormal", "slice")


@dataclass(frozen=True)
class EmbedNet:
    theta: np.ndarray
    spec: models.ModelSpec
    objective: float = float("nan")

    @property
    def out_dim(self) -> int:
        return self.spec.widths[-1]


def make_embed_net(n_features: int, dim: int, hidden=(), activation="tanh", seed=0, zero=False) -> EmbedNet:
    spec = models.ModelSpec("mlp_regressor", (n_features, *hidden, dim), activation, seed=seed)
    theta = np.zeros(models.n_params(spec)) if zero else models.init_params(spec)
    return EmbedNet(theta, spec)


def target_embedding(pca: PcaModel, x) -> np.ndarray:
    return pca_project(pca, x)


def _embed_batch(net: EmbedNet, data, pca: PcaModel) -> models.TaskBatch:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != net.spec.widths[0]:
        raise ValidationError(f"data shape {data.shape} does not match embed net input {net.spec.widths[0]}")
    if pca.n_components != net.out_dim:
        raise ValidationError(f"PCA has {pca.n_components} components, embed net outputs {net.out_dim}")
    return models.TaskBatch(data, target_embedding(pca, data), "regression")


def embed_objective(net: EmbedNet, data, pca: PcaModel) -> float:
    """Mean over rows of ||G(x) - e_t(x)||^2."""
    return models.loss(net.theta, _embed_batch(net, data, pca), net.spec)


def train_embed_net(net: EmbedNet, data, pca: PcaModel, steps: int, lr: float) -> EmbedNet:
    """Full-batch gradient descent on the embedding objective."""
    if steps < 1 or lr <= 0:
        raise ValidationError("train_embed_net needs steps >= 1 and lr > 0")
    batch = _embed_batch(net, data, pca)
    theta = net.theta.copy()
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked explicitly
        for step in range(steps):
            val, g = models.loss_and_grad(theta, batch, net.spec)
            if not np.isfinite(val) or not np.all(np.isfinite(g)):
                raise NumericError(f"embedding objective diverged at step {step}")
            theta = theta - lr * g
        final = models.loss(theta, batch, net.spec)
    if not np.isfinite(final):
        raise NumericError(f"embedding objective diverged at step {steps}")
    return EmbedNet(theta, net.spec, final)


def context_embedding(net: EmbedNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    if rows.shape[1] != net.spec.widths[0]:
        raise ValidationError(f"input has {rows.shape[1]} features, embed net expects {net.spec.widths[0]}")
    dummy = np.zeros((rows.shape[0], net.out_dim))
    out = models.forward(net.theta, models.TaskBatch(rows, dummy, "regression"), net.spec)
    return out[0] if single else out


def check_level_dims(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims or dims[-1] < 1 or any(a <= b for a, b in zip(dims, dims[1:])):
        raise ValidationError(f"hierarchy dims must be strictly decreasing and >= 1, got {dims}")
    return dims


def hierarchical_embeddings(nets, x, K: int | None = None) -> list[np.ndarray]:
    K = len(nets) if K is None else K
    if not 1 <= K <= len(nets):
        raise ValidationError(f"K={K} but {len(nets)} level nets were given")
    check_level_dims([n.out_dim for n in nets[:K]])
    return [context_embedding(net, x) for net in nets[:K]]


@dataclass(frozen=True)
class EmbeddingLevel:
    pca: PcaModel
    net: EmbedNet


def fit_levels(data, dims, hidden=(), activation="tanh", steps=500, lr=0.05, seed=0) -> list[EmbeddingLevel]:
    """Fit one PCA and train one embedding net per hierarchy level.

    The flat case is ``dims=(d_e,)``.
    """
    dims = check_level_dims(dims)
    data = np.asarray(data, dtype=np.float64)
    levels = []
    for k, dim in enumerate(dims):
        pca = pca_fit(data, dim)
        net = make_embed_net(data.shape[1], dim, hidden, activation, seed=seed + k)
        levels.append(EmbeddingLevel(pca, train_embed_net(net, data, pca, steps, lr)))
    return levels


@dataclass(frozen=True)
class ManifoldMap:
    """One projection matrix per level, each with orthonormal rows."""

    levels: tuple[np.ndarray, ...]

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]


def make_manifold_map(d: int, dims, seed: int = 0, mode: str = "orthonormal") -> ManifoldMap:
    dims = check_level_dims(dims)
    if dims[0] > d:
        raise ValidationError(f"embedding dim {dims[0]} exceeds parameter dim {d}")
    if mode not in MANIFOLD_MODES:
        raise ValidationError(f"unknown manifold mode {mode!r}")
    mats = []
    for k, dim in enumerate(dims):
        if mode == "slice":
            # trailing coordinates: the output-layer bias and last weights
            mats.append(np.eye(d)[d - dim :])
            continue
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, k])))
        q, r = np.linalg.qr(rng.standard_normal((d, dim)))
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        mats.append(np.ascontiguousarray(q.T))
    return ManifoldMap(tuple(mats))


def model_embedding(mmap: ManifoldMap, w, level: int = 0) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    proj = mmap.levels[level]
    if w.shape != (proj.shape[1],):
        raise ValidationError(f"parameter vector has shape {w.shape}, manifold map expects ({proj.shape[1]},)")
    return proj @ w


def _check_context(proj, e_c):
    e_c = np.asarray(e_c, dtype=np.float64)
    if e_c.shape[-1] != proj.shape[0]:
        raise ValidationError(f"context embedding has dim {e_c.shape[-1]}, map level has {proj.shape[0]}")
    return e_c


def alignment_penalty(mmap: ManifoldMap, w, e_c, level: int = 0) -> float:
    """Mean over rows of ``||e_c - P w||^2`` (a single row is allowed)."""
    proj = mmap.levels[level]
    e_c = _check_context(proj, e_c)
    diff = e_c - model_embedding(mmap, w, level)
    return float(np.mean(np.sum(np.atleast_2d(diff) ** 2, axis=1)))


def alignment_grad(mmap: ManifoldMap, w, e_c, level: int = 0) -> np.ndarray:
    """Closed form ``2 P^T (P w - mean(e_c))``."""
    proj = mmap.levels[level]
    e_c = _check_context(proj, e_c)
    target = np.atleast_2d(e_c).mean(axis=0)
    return 2.0 * proj.T @ (model_embedding(mmap, w, level) - target)
