"""Oracle and invariant battery behind ``cagm verify``.

Each check compares the implementation with an independent reference
(finite differences, closed-form algebra, numpy's LAPACK eigensolver, or a
rerun) and returns a :class:`Check`. The directional smoke test is
reported with the others but never counts as a failure.
"""

from __future__ import annotations

import filecmp
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cagm import models
from cagm.config import make_config
from cagm.embed import (
    ManifoldMap,
    alignment_grad,
    alignment_penalty,
    embed_objective,
    make_embed_net,
    make_manifold_map,
    train_embed_net,
)
from cagm.harness import aggregate
from cagm.linalg import fd_gradient, pca_fit, pca_project
from cagm.objectives import Linear, Quadratic, Quartic
from cagm.optimizer import (
    OptimizerConfig,
    cagm_step,
    combined_objective,
    curvature_reg,
    curvature_reg_grad,
    geodesic_path,
    metric_tensor,
    step_terms,
)
from cagm.trainer import train_seed


@dataclass
class Check:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    gating: bool = True
    seconds: float = 0.0


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def random_batch(rng, spec: models.ModelSpec, n: int = 6) -> models.TaskBatch:
    if spec.architecture == "seq_model":
        lengths = rng.integers(1, 6, size=n)
        tokens = np.full((n, lengths.max()), models.PAD)
        for i, ln in enumerate(lengths):
            tokens[i, :ln] = rng.integers(0, spec.vocab, size=ln)
        return models.TaskBatch(tokens, rng.integers(0, spec.vocab, size=n), "sequence")
    x = rng.standard_normal((n, spec.widths[0]))
    if spec.architecture == "mlp_regressor":
        return models.TaskBatch(x, rng.standard_normal((n, spec.widths[-1])), "regression")
    return models.TaskBatch(x, rng.integers(0, spec.widths[-1], size=n), "classification")


def random_spec(rng, architecture: str) -> models.ModelSpec:
    act = str(rng.choice(models.ACTIVATIONS))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(0, 3)))
    seed = int(rng.integers(0, 2**31))
    if architecture == "seq_model":
        vocab = int(rng.integers(3, 8))
        return models.ModelSpec("seq_model", (int(rng.integers(2, 5)), *hidden, vocab), act,
                                vocab=vocab, window=int(rng.integers(1, 4)), seed=seed)
    return models.ModelSpec(architecture, (int(rng.integers(2, 6)), *hidden, int(rng.integers(2, 5))), act, seed=seed)


def check_gradients(instances: int = 20, tol: float = 1e-4, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst = {}
    for arch in ("mlp_classifier", "mlp_regressor", "seq_model"):
        errs = []
        for _ in range(instances):
            spec = random_spec(rng, arch)
            batch = random_batch(rng, spec)
            w = models.init_params(spec) + 0.1 * rng.standard_normal(models.n_params(spec))
            obj = models.bind(spec, batch)
            errs.append(rel_err(obj.grad(w), fd_gradient(obj.loss, w)))
        worst[arch] = max(errs)

    errs_align, errs_comb = [], []
    for _ in range(instances):
        d = int(rng.integers(3, 12))
        dims = (int(rng.integers(2, min(d, 4) + 1)), 1)
        mmap = make_manifold_map(d, dims, seed=int(rng.integers(0, 1000)))
        w = rng.standard_normal(d)
        e_c = [rng.standard_normal((5, k)) for k in dims]
        errs_align.append(rel_err(alignment_grad(mmap, w, e_c[0]), fd_gradient(lambda v: alignment_penalty(mmap, v, e_c[0]), w)))
        cfg = OptimizerConfig(eta=0.1, lam=float(rng.uniform(0.01, 1.0)), mu=0.0, use_hierarchy=True)
        obj = Quadratic(rng.uniform(0.5, 3.0, d), rng.standard_normal(d))
        terms = step_terms(w, obj, e_c, cfg, mmap)
        direction = terms.loss_grad + cfg.lam * terms.align_grad
        errs_comb.append(rel_err(direction, fd_gradient(lambda v: combined_objective(v, obj, e_c, cfg, mmap), w)))
    worst["alignment_grad"] = max(errs_align)
    worst["combined_direction"] = max(errs_comb)
    return Check("gradient oracle", all(v <= tol for v in worst.values()), {"max_rel_err": worst, "tol": tol})


def _reduction_cfg(p1: int, p2: int, lam: float):
    return make_config({
        "task.n_train": 128, "model.hidden": (8,), "protocol.batch_size": 16, "opt.lambda": lam, "opt.mu": 0.0,
        "opt.use_alignment": True, "opt.use_hierarchy": True, "opt.use_curvature": True,
        "protocol.phase1_steps": p1, "protocol.phase2_steps": p2, "protocol.eval_every": 100,
        "protocol.checkpoint_every": 100,
    })


def check_reduction(steps: int = 500) -> Check:
    with tempfile.TemporaryDirectory() as tmp:
        split = train_seed(_reduction_cfg(steps // 2, steps - steps // 2, 0.0), 0, Path(tmp) / "cagm", resume=False)
        plain = train_seed(_reduction_cfg(steps, 0, 0.0), 0, Path(tmp) / "sgd", resume=False)
    same = split["params"].tobytes() == plain["params"].tobytes()
    return Check("reduction to SGD", same and split["steps"] == steps,
                 {"steps": split["steps"], "bit_identical": same})


def check_worked_step() -> Check:
    obj = Quadratic([1.0, 1.0])
    mmap = ManifoldMap((np.array([[1.0, 0.0]]),))
    w = np.array([1.0, 0.0])
    e_c = np.array([0.5])
    got = {}
    for mode in ("descent", "literal"):
        cfg = OptimizerConfig(eta=0.1, lam=0.1, mu=0.0, sign_mode=mode)
        got[mode] = cagm_step(w, obj, e_c, cfg, mmap)
    # hand arithmetic: dL = (1, 0), dA = 2 * (1 - 0.5) * (1, 0) = (1, 0)
    want = {"descent": np.array([0.89, 0.0]), "literal": np.array([1.0, 0.0])}
    err = {m: float(np.max(np.abs(got[m] - want[m]))) for m in want}
    return Check("worked update step", all(e <= 1e-12 for e in err.values()),
                 {"descent": got["descent"].tolist(), "literal": got["literal"].tolist(), "max_abs_err": err})


def check_embed_convexity(seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((64, 4))
    pca = pca_fit(x, 2)
    net = train_embed_net(make_embed_net(4, 2, seed=seed), x, pca, steps=2000, lr=1e-2)
    # closed form: least squares of the targets on [x, 1]
    design = np.hstack([x, np.ones((64, 1))])
    coef, *_ = np.linalg.lstsq(design, pca_project(pca, x), rcond=None)
    exact = np.concatenate([coef[:4].ravel(), coef[4]])
    obj = embed_objective(net, x, pca)
    diff = float(np.max(np.abs(net.theta - exact)))
    return Check("embedding least squares", obj <= 1e-4 and diff <= 1e-3, {"objective": obj, "param_max_abs_diff": diff})


def check_metric(draws: int = 20, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    gamma = 0.01
    lin = metric_tensor(Linear(rng.standard_normal(5), 0.3), rng.standard_normal(5), gamma)
    quad = metric_tensor(Quadratic([2.0, 4.0]), np.array([0.3, -0.7]), gamma)
    positive = True
    for _ in range(draws):
        spec = random_spec(rng, "mlp_classifier")
        obj = models.bind(spec, random_batch(rng, spec))
        w = models.init_params(spec) + rng.standard_normal(models.n_params(spec))
        positive &= bool(np.all(metric_tensor(obj, w, float(rng.uniform(1e-4, 1.0))) > 0))
    lin_err = float(np.max(np.abs(lin - gamma)))
    quad_err = float(np.max(np.abs(quad - [2.01, 4.01])))
    return Check("metric tensor", lin_err <= 1e-4 and quad_err <= 1e-3 and positive,
                 {"linear_max_abs_err": lin_err, "quadratic": quad.tolist(), "all_positive": positive})


def check_geodesic(seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    obj = Quadratic([4.0, 1.0])
    path = geodesic_path([0.0, 0.0], [1.0, 0.0], obj, gamma=1e-6, segments=16, iters=50)
    monotone = all(b <= a for a, b in zip(path.energies, path.energies[1:]))

    # a bent start must relax back to the chord
    t = np.linspace(0, 1, 17)[:, None]
    w_a, w_b = np.array([0.0, 0.0]), np.array([1.0, 2.0])
    init = (1 - t) * w_a + t * w_b + 0.1 * np.sin(np.pi * t) * np.array([1.0, -1.0])
    bent = geodesic_path(w_a, w_b, obj, gamma=1e-6, segments=16, iters=200, init=init)
    monotone &= all(b <= a for a, b in zip(bent.energies, bent.energies[1:]))
    deviation = float(np.max(np.abs(bent.points - ((1 - t) * w_a + t * w_b))))

    for _ in range(5):
        spec = random_spec(rng, "mlp_classifier")
        obj_m = models.bind(spec, random_batch(rng, spec))
        d = models.n_params(spec)
        p = geodesic_path(rng.standard_normal(d), rng.standard_normal(d), obj_m, gamma=0.01, segments=8, iters=10)
        monotone &= all(b <= a for a, b in zip(p.energies, p.energies[1:]))
    length_err = abs(path.length - 2.0)
    return Check("geodesic relaxation", deviation <= 1e-6 and length_err <= 1e-3 and monotone,
                 {"length": path.length, "straight_line_deviation": deviation, "energy_non_increasing": monotone})


def check_curvature() -> Check:
    r = curvature_reg(Quadratic([2.0, 4.0]), np.array([0.2, -0.5]), 0.5)
    g = curvature_reg_grad(Quadratic([2.0, 4.0]), np.array([0.2, -0.5]), 0.5)
    q = curvature_reg_grad(Quartic(1), np.array([0.5]), 1.0)[0]
    ok = abs(r - 10.0) <= 0.1 and float(np.max(np.abs(g))) <= 1e-3 and abs(q - 72.0) <= 0.02 * 72.0
    return Check("curvature regularizer", ok, {"R_quadratic": r, "grad_quadratic_max": float(np.max(np.abs(g))),
                                               "grad_quartic": float(q)})


def check_pca(instances: int = 50, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst_val, worst_cos = 0.0, 1.0
    for _ in range(instances):
        n = int(rng.integers(1, 17))
        x = rng.standard_normal((int(rng.integers(n + 2, 3 * n + 8)), n)) * rng.uniform(0.2, 3.0, n)
        model = pca_fit(x, n)
        cov = np.cov(x, rowvar=False, ddof=1).reshape(n, n)
        vals, vecs = np.linalg.eigh(cov)
        vals, vecs = vals[::-1], vecs[:, ::-1]
        worst_val = max(worst_val, float(np.max(np.abs(model.explained_variance - vals))))
        cos = np.abs(np.sum(model.components * vecs.T, axis=1))
        worst_cos = min(worst_cos, float(cos.min()))
    return Check("PCA against LAPACK", worst_val <= 1e-8 and worst_cos >= 1 - 1e-8,
                 {"max_eigenvalue_diff": worst_val, "min_abs_cos": worst_cos})


def _tree_equal(a: Path, b: Path, skip=("timing",)) -> bool:
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and not p.name.startswith(skip))
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and not p.name.startswith(skip))
    return files_a == files_b and all(filecmp.cmp(a / f, b / f, shallow=False) for f in files_a)


def check_determinism() -> Check:
    cfg = _reduction_cfg(100, 100, 0.05)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        train_seed(cfg, 3, tmp / "a", resume=False)
        train_seed(cfg, 3, tmp / "b", resume=False)
        rerun = _tree_equal(tmp / "a", tmp / "b")
        part = train_seed(cfg, 3, tmp / "c", resume=False, stop_after=150)
        full = train_seed(cfg, 3, tmp / "c", resume=True)
        resumed = part["status"] == "interrupted" and _tree_equal(tmp / "a", tmp / "c")
        resumed &= full["params"].tobytes() == train_seed(cfg, 3, tmp / "d", resume=False)["params"].tobytes()
    return Check("determinism and resume", rerun and resumed, {"rerun_identical": rerun, "resume_identical": resumed})


SMOKE_NOISE = (0.1, 0.5, 1.0)
SMOKE_LAMBDAS = (0.001, 0.01, 0.1)


def smoke_test(seeds=tuple(range(10)), margin_pp: float = 0.5) -> Check:
    """Baseline versus grid-tuned CAGM validation accuracy at each noise level.

    Lambda is picked per noise level by mean validation loss, so the
    comparison is on accuracy, which the selection does not see directly.
    """
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for level in SMOKE_NOISE:
            base = make_config({"task.noise_std": level, "opt.use_hierarchy": True, "run.seeds": tuple(seeds)})

            def run(lam, tag):
                cfg = base.with_values(**{"opt.lambda": lam})
                res = [train_seed(cfg, s, Path(tmp) / f"{level}-{tag}-{s}", resume=False) for s in seeds]
                return res

            baseline = run(0.0, "base")
            best = None
            for lam in SMOKE_LAMBDAS:
                res = run(lam, f"lam{lam}")
                val_loss = aggregate([r["final"]["val_loss"] for r in res])["mean"]
                if best is None or val_loss < best[0]:
                    best = (val_loss, lam, res)
            b_acc = aggregate([r["final"]["val_accuracy"] for r in baseline])
            p_acc = aggregate([r["final"]["val_accuracy"] for r in best[2]])
            gap = 100.0 * (p_acc["mean"] - b_acc["mean"])
            rows.append({
                "noise_std": level, "lambda": best[1], "baseline_val_accuracy": b_acc["mean"],
                "proposed_val_accuracy": p_acc["mean"], "gap_pp": gap,
                "direction": "proposed ahead" if gap > 0 else "baseline ahead" if gap < 0 else "tie",
            })
    ok = all(r["gap_pp"] >= -margin_pp for r in rows)
    return Check("directional smoke test", ok, {"seeds": len(seeds), "margin_pp": margin_pp, "rows": rows}, gating=False)


CHECKS = (
    check_gradients, check_reduction, check_worked_step, check_embed_convexity, check_metric,
    check_geodesic, check_curvature, check_pca, check_determinism,
)


def run_all(smoke: bool = True, smoke_seeds=tuple(range(10))) -> list[Check]:
    out = []
    for fn in CHECKS:
        started = time.perf_counter()
        res = fn()
        res.seconds = time.perf_counter() - started
        out.append(res)
    if smoke:
        started = time.perf_counter()
        res = smoke_test(smoke_seeds)
        res.seconds = time.perf_counter() - started
        out.append(res)
    return out


def report(checks) -> dict:
    return {
        "passed": all(c.passed for c in checks if c.gating),
        "checks": [asdict(c) for c in checks],
    }
