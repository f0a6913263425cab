"""Context-aligned gradient steps, curvature metric and discrete geodesics.

An *objective* is any object with ``loss(w) -> float`` and ``grad(w) ->
array`` (see :class:`cagm.models.ModelObjective` and
:mod:`cagm.objectives`). Context embeddings ``e_c`` are passed as a list
with one array per hierarchy level; a bare array means a single level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cagm.embed import ManifoldMap, alignment_grad, alignment_penalty
from cagm.errors import NumericError, ValidationError
from cagm.linalg import FD_GRAD_STEP, FD_HESS_STEP, fd_gradient, fd_hessian_diag

SIGN_MODES = ("descent", "literal")
METRIC_FLOOR = 1e-3


@dataclass(frozen=True)
class OptimizerConfig:
    eta: float = 0.1
    lam: float = 0.0
    mu: float = 0.0
    gamma: float = 1e-2
    sign_mode: str = "descent"
    use_alignment: bool = True
    use_curvature: bool = True
    use_hierarchy: bool = False
    level_weights: tuple[float, ...] = ()
    fd_grad_step: float = FD_GRAD_STEP
    fd_hess_step: float = FD_HESS_STEP
    max_curvature_dim: int = 256

    def __post_init__(self):
        if not self.eta > 0:
            raise ValidationError("opt.eta must be > 0")
        if not self.gamma > 0:
            raise ValidationError("opt.gamma must be > 0")
        if self.lam < 0 or self.mu < 0:
            raise ValidationError("opt.lambda and opt.mu must be >= 0")
        if self.sign_mode not in SIGN_MODES:
            raise ValidationError(f"opt.sign_mode must be one of {SIGN_MODES}")
        if any(b < 0 for b in self.level_weights):
            raise ValidationError("opt.level_weights must be >= 0")
        if self.level_weights and abs(sum(self.level_weights) - 1.0) > 1e-9:
            raise ValidationError("opt.level_weights must sum to 1")

    @property
    def alignment_on(self) -> bool:
        return self.use_alignment and self.lam > 0

    @property
    def curvature_on(self) -> bool:
        return self.use_curvature and self.mu > 0


def _levels(e_c):
    if e_c is None:
        return []
    if isinstance(e_c, (list, tuple)):
        return list(e_c)
    return [e_c]


def _level_weights(cfg: OptimizerConfig, n_levels: int):
    if not cfg.use_hierarchy or n_levels == 1:
        return [1.0]
    if cfg.level_weights:
        if len(cfg.level_weights) != n_levels:
            raise ValidationError(f"{len(cfg.level_weights)} level weights for {n_levels} levels")
        return list(cfg.level_weights)
    return [1.0 / n_levels] * n_levels


def _alignment(mmap: ManifoldMap, w, e_c, cfg: OptimizerConfig, grad: bool):
    levels = _levels(e_c)
    if mmap is None or not levels:
        raise ValidationError("alignment is enabled but no manifold map / context embedding was given")
    total = None
    for k, beta in enumerate(_level_weights(cfg, len(levels))):
        if grad:
            term = alignment_grad(mmap, w, levels[k], level=k)
        else:
            term = alignment_penalty(mmap, w, levels[k], level=k)
        term = term if beta == 1.0 else beta * term
        total = term if total is None else total + term
    return total


def metric_tensor(obj, w, gamma: float, h: float = FD_HESS_STEP) -> np.ndarray:
    """Diagonal of Hessian + gamma*I, floored at gamma*1e-3 so it stays positive."""
    if not gamma > 0:
        raise ValidationError("gamma must be > 0")
    diag = fd_hessian_diag(obj.loss, w, h)
    if not np.all(np.isfinite(diag)):
        raise NumericError("non-finite curvature in metric tensor")
    return np.maximum(diag + gamma, gamma * METRIC_FLOOR)


def curvature_reg(obj, w, mu: float, h: float = FD_HESS_STEP) -> float:
    """``mu * sum_i (d^2 L / dw_i^2)^2``."""
    if mu < 0:
        raise ValidationError("mu must be >= 0")
    if mu == 0:
        return 0.0
    diag = fd_hessian_diag(obj.loss, w, h)
    val = float(mu * np.dot(diag, diag))
    if not np.isfinite(val):
        raise NumericError("non-finite curvature regularizer")
    return val


def curvature_reg_grad(
    obj,
    w,
    mu: float,
    h_hess: float = FD_HESS_STEP,
    h_grad: float = FD_GRAD_STEP,
    max_dim: int = 256,
) -> np.ndarray:
    """Central differences of :func:`curvature_reg`; costs O(d^2) loss calls."""
    w = np.asarray(w, dtype=np.float64)
    if mu == 0:
        return np.zeros_like(w)
    if w.size > max_dim:
        raise ValidationError(
            f"curvature gradient needs O(d^2) loss evaluations and d={w.size} exceeds the cap "
            f"of {max_dim}; disable it (opt.use_curvature = false) or raise opt.max_curvature_dim"
        )
    return fd_gradient(lambda v: curvature_reg(obj, v, mu, h_hess), w, h_grad)


def combined_objective(w, obj, e_c, cfg: OptimizerConfig, mmap: ManifoldMap | None = None) -> float:
    """``L + lambda * A + R`` with disabled terms left out."""
    val = obj.loss(w)
    if cfg.alignment_on:
        val += cfg.lam * _alignment(mmap, w, e_c, cfg, grad=False)
    if cfg.curvature_on:
        val += curvature_reg(obj, w, cfg.mu, cfg.fd_hess_step)
    return float(val)


@dataclass
class StepTerms:
    loss: float
    loss_grad: np.ndarray
    align_grad: np.ndarray | None = None
    curv_grad: np.ndarray | None = None
    norms: dict = field(default_factory=dict)


def step_terms(w, obj, e_c, cfg: OptimizerConfig, mmap: ManifoldMap | None = None) -> StepTerms:
    w = np.asarray(w, dtype=np.float64)
    if hasattr(obj, "loss_and_grad"):
        val, g = obj.loss_and_grad(w)
    else:
        val, g = obj.loss(w), obj.grad(w)
    terms = StepTerms(val, g)
    if not np.all(np.isfinite(g)) or not np.isfinite(val):
        raise NumericError("non-finite loss gradient")
    if cfg.alignment_on:
        terms.align_grad = _alignment(mmap, w, e_c, cfg, grad=True)
        if not np.all(np.isfinite(terms.align_grad)):
            raise NumericError("non-finite alignment gradient")
    if cfg.curvature_on:
        terms.curv_grad = curvature_reg_grad(
            obj, w, cfg.mu, cfg.fd_hess_step, cfg.fd_grad_step, cfg.max_curvature_dim
        )
        if not np.all(np.isfinite(terms.curv_grad)):
            raise NumericError("non-finite curvature gradient")
    terms.norms = {
        "loss": float(np.linalg.norm(g)),
        "alignment": float(np.linalg.norm(terms.align_grad)) if terms.align_grad is not None else 0.0,
        "curvature": float(np.linalg.norm(terms.curv_grad)) if terms.curv_grad is not None else 0.0,
    }
    return terms


def apply_step(w, terms: StepTerms, cfg: OptimizerConfig) -> np.ndarray:
    """Descent mode: ``w - eta*(dL + lambda*dA + dR)``.

    Literal mode keeps the printed sign of the alignment term:
    ``w - eta*dL + lambda*dA`` (the curvature term, when on, is still
    subtracted as ``eta*dR``). Disabled terms are skipped, not multiplied
    by zero, so lambda = mu = 0 reproduces plain SGD bit for bit.
    """
    w = np.asarray(w, dtype=np.float64)
    if cfg.sign_mode == "descent":
        direction = terms.loss_grad
        if terms.align_grad is not None:
            direction = direction + cfg.lam * terms.align_grad
        if terms.curv_grad is not None:
            direction = direction + terms.curv_grad
        return w - cfg.eta * direction
    direction = terms.loss_grad
    if terms.curv_grad is not None:
        direction = direction + terms.curv_grad
    out = w - cfg.eta * direction
    if terms.align_grad is not None:
        out = out + cfg.lam * terms.align_grad
    return out


def cagm_step(w, obj, e_c, cfg: OptimizerConfig, mmap: ManifoldMap | None = None) -> np.ndarray:
    return apply_step(w, step_terms(w, obj, e_c, cfg, mmap), cfg)


def sgd_step(w, obj, eta: float) -> np.ndarray:
    return np.asarray(w, dtype=np.float64) - eta * obj.grad(w)


# --- discrete geodesics -------------------------------------------------


@dataclass
class GeodesicPath:
    points: np.ndarray  # (N+1, d)
    length: float
    energy: float
    energies: list[float]
    lengths: list[float]

    @property
    def segments(self) -> int:
        return self.points.shape[0] - 1


def _midpoint_metrics(obj, pts, gamma, h):
    mids = 0.5 * (pts[1:] + pts[:-1])
    return np.stack([metric_tensor(obj, m, gamma, h) for m in mids])


def path_energy_length(obj, pts, gamma: float, h: float = FD_HESS_STEP):
    """Discrete energy ``sum_j dw_j^T M_j dw_j`` and length ``sum_j sqrt(.)``,
    with ``M_j`` evaluated at segment midpoints."""
    metrics = _midpoint_metrics(obj, pts, gamma, h)
    delta = np.diff(pts, axis=0)
    seg = np.sum(delta * delta * metrics, axis=1)
    energy = float(np.sum(seg))
    if not np.isfinite(energy):
        raise NumericError("non-finite path energy")
    return energy, float(np.sum(np.sqrt(seg))), metrics


def _tridiag_target(pts, metrics):
    """Minimizer of the energy with the metric frozen at ``metrics``.

    The frozen problem separates per coordinate into a tridiagonal system
    in the interior points; solved by the Thomas algorithm across all
    coordinates at once.
    """
    n_int = pts.shape[0] - 2
    lower = metrics[:-1]  # M_{i-1} for interior i
    upper = metrics[1:]  # M_i
    diag = lower + upper
    rhs = np.zeros_like(pts[1:-1])
    rhs[0] += lower[0] * pts[0]
    rhs[-1] += upper[-1] * pts[-1]
    c = np.zeros_like(rhs)
    d = np.zeros_like(rhs)
    c[0] = -upper[0] / diag[0]
    d[0] = rhs[0] / diag[0]
    for i in range(1, n_int):
        denom = diag[i] + lower[i] * c[i - 1]
        c[i] = -upper[i] / denom
        d[i] = (rhs[i] + lower[i] * d[i - 1]) / denom
    out = np.empty_like(rhs)
    out[-1] = d[-1]
    for i in range(n_int - 2, -1, -1):
        out[i] = d[i] - c[i] * out[i + 1]
    return out


def geodesic_path(
    w_a,
    w_b,
    obj,
    gamma: float,
    segments: int = 16,
    iters: int = 50,
    step: float = 1.0,
    h: float = FD_HESS_STEP,
    init=None,
    tol: float = 1e-14,
    max_halvings: int = 30,
) -> GeodesicPath:
    """Relax a discretized path between two parameter vectors.

    Starts from the straight line (or ``init``, an (N+1, d) array whose
    endpoints are overwritten) and repeatedly moves interior points toward
    the frozen-metric energy minimizer. A move is kept only when neither
    the energy nor the discrete length goes up; otherwise the step is
    halved. Endpoints never move.
    """
    if segments < 1:
        raise ValidationError("segments must be >= 1")
    w_a = np.asarray(w_a, dtype=np.float64)
    w_b = np.asarray(w_b, dtype=np.float64)
    if w_a.shape != w_b.shape or w_a.ndim != 1:
        raise ValidationError("endpoints must be 1-d vectors of equal size")
    t = np.linspace(0.0, 1.0, segments + 1)[:, None]
    if init is None:
        pts = (1.0 - t) * w_a + t * w_b
    else:
        pts = np.array(init, dtype=np.float64)
        if pts.shape != (segments + 1, w_a.size):
            raise ValidationError(f"init must have shape {(segments + 1, w_a.size)}")
    pts[0], pts[-1] = w_a, w_b

    energy, length, metrics = path_energy_length(obj, pts, gamma, h)
    energies, lengths = [energy], [length]
    if segments > 1:
        for _ in range(iters):
            target = _tridiag_target(pts, metrics)
            move = target - pts[1:-1]
            s = step
            accepted = False
            for _ in range(max_halvings):
                cand = pts.copy()
                cand[1:-1] += s * move
                e_new, l_new, m_new = path_energy_length(obj, cand, gamma, h)
                if e_new <= energy and l_new <= length:
                    accepted = True
                    break
                s *= 0.5
            if not accepted:
                break
            gain = energy - e_new
            pts, energy, length, metrics = cand, e_new, l_new, m_new
            energies.append(energy)
            lengths.append(length)
            if gain <= tol * max(energy, 1e-300):
                break
    return GeodesicPath(pts, length, energy, energies, lengths)


def geodesic_diagnostics(path: GeodesicPath, obj, gamma: float, h: float = FD_HESS_STEP) -> dict:
    """Compare the relaxed path with the straight chord under the same metric."""
    w_a, w_b = path.points[0], path.points[-1]
    t = np.linspace(0.0, 1.0, path.segments + 1)[:, None]
    _, chord, _ = path_energy_length(obj, (1.0 - t) * w_a + t * w_b, gamma, h)
    ratio = 1.0 if chord == 0.0 else path.length / chord
    return {"geodesic_length": path.length, "straight_line_length": chord, "ratio": ratio}
