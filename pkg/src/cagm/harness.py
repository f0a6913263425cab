"""Multi-seed experiments, grid search, ablations and plot-data export."""

from __future__ import annotations

import itertools
import json
import logging
import math
from pathlib import Path

import numpy as np

from cagm import models
from cagm.config import ConfigError, ExperimentConfig
from cagm.errors import NumericError, ValidationError
from cagm.trainer import METRIC_COLUMNS, read_csv, train_seed, write_csv, write_json

log = logging.getLogger(__name__)

FINAL_KEYS = (
    "val_loss", "val_accuracy", "val_perplexity", "test_loss", "test_accuracy", "test_perplexity",
    "target_accuracy", "target_loss", "optimal_perplexity",
)


def aggregate(values) -> dict:
    vals = [float(v) for v in values if v is not None and math.isfinite(v)]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.array(vals)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}


def _clear_checkpoints(seed_dir: Path):
    for p in seed_dir.glob("checkpoint-*.json"):
        p.unlink()


def run_experiment(cfg: ExperimentConfig, out_dir=None, resume: bool = True) -> dict:
    """Run every seed of ``cfg`` into ``out_dir/seed-<s>`` and write ``summary.json``."""
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    per_seed = []
    for seed in cfg.seeds:
        seed_dir = out / f"seed-{seed}"
        if not resume and seed_dir.exists():
            _clear_checkpoints(seed_dir)
        res = train_seed(cfg, seed, seed_dir, resume=resume)
        per_seed.append(
            {k: res.get(k) for k in ("seed", "status", "error", "steps", "batch_digest", "n_params", "config_digest")}
            | {"final": res.get("final")}
        )
    summary = {
        "config_digest": cfg.digest(),
        "status": "ok" if all(r["status"] == "ok" for r in per_seed) else "failed",
        "seeds": per_seed,
        "aggregate": {
            k: aggregate([(r["final"] or {}).get(k) for r in per_seed])
            for k in FINAL_KEYS
            if any((r["final"] or {}).get(k) is not None for r in per_seed)
        },
    }
    write_json(out / "summary.json", summary)
    return summary


def _mean(summary, key):
    agg = summary["aggregate"].get(key)
    return None if agg is None else agg["mean"]


GRID_COLUMNS = ("cell", "eta", "batch_size", "lambda", "status", "val_loss_mean", "val_accuracy_mean", "val_perplexity_mean")


def grid_search(cfg: ExperimentConfig, out_dir=None):
    """Evaluate the Cartesian product of ``grid.eta`` x ``grid.batch_size`` x
    ``grid.lambda`` (an empty list means the configured value).

    Returns ``(best_config, rows)``. The best cell has the lowest mean final
    validation loss; ties go to lower eta, then smaller batch, then lower
    lambda. Failed cells stay in the table but are never selected.
    """
    out = Path(out_dir or cfg.out)
    grid = cfg.grid
    v = cfg.values
    etas = grid.eta or (v["opt.eta"],)
    sizes = grid.batch_size or (v["protocol.batch_size"],)
    lams = grid.lam or (v["opt.lambda"],)
    rows, best, best_key, best_idx = [], None, None, None
    for i, (eta, bs, lam) in enumerate(itertools.product(etas, sizes, lams)):
        cell_cfg = cfg.with_values(**{"opt.eta": eta, "protocol.batch_size": bs, "opt.lambda": lam})
        summary = run_experiment(cell_cfg, out / f"cell-{i}", resume=False)
        ok = summary["status"] == "ok"
        row = {
            "cell": i, "eta": float(eta), "batch_size": int(bs), "lambda": float(lam),
            "status": summary["status"],
            "val_loss_mean": _mean(summary, "val_loss") if ok else None,
            "val_accuracy_mean": _mean(summary, "val_accuracy") if ok else None,
            "val_perplexity_mean": _mean(summary, "val_perplexity") if ok else None,
        }
        rows.append(row)
        if ok:
            key = (row["val_loss_mean"], eta, bs, lam)
            if best_key is None or key < best_key:
                best_key, best, best_idx = key, cell_cfg, i
    write_csv(out / "grid.csv", GRID_COLUMNS, rows)
    write_json(
        out / "grid.json",
        {"best_cell": best_idx, "rows": rows},
    )
    if best is not None:
        (out / "best-config.txt").write_text(best.to_text(), encoding="utf-8")
    return best, rows


ABLATION_COLUMNS = (
    "variant", "use_alignment", "use_curvature", "use_hierarchy", "status",
    "val_loss_mean", "val_loss_std", "val_accuracy_mean", "val_accuracy_std",
    "val_perplexity_mean", "val_perplexity_std", "test_accuracy_mean", "batch_digests",
)


def ablation_variants():
    for a, c, h in itertools.product((False, True), repeat=3):
        name = f"align={'on' if a else 'off'},curv={'on' if c else 'off'},hier={'on' if h else 'off'}"
        yield name, a, c, h


def run_ablations(cfg: ExperimentConfig, out_dir=None) -> list[dict]:
    """Run the 2^3 lattice of alignment / curvature / hierarchy switches.

    All variants share seeds and therefore data order; the per-seed batch
    digests are recorded so that can be checked.
    """
    out = Path(out_dir or cfg.out)
    dim = models.n_params(cfg.model)
    if cfg.optimizer.mu > 0 and dim > cfg.optimizer.max_curvature_dim:
        raise ConfigError(
            "opt.max_curvature_dim",
            f"model has {dim} parameters; the curvature variants need d <= {cfg.optimizer.max_curvature_dim}",
        )
    rows = []
    for i, (name, a, c, h) in enumerate(ablation_variants()):
        var_cfg = cfg.with_values(**{"opt.use_alignment": a, "opt.use_curvature": c, "opt.use_hierarchy": h})
        summary = run_experiment(var_cfg, out / f"variant-{i}", resume=False)
        row = {"variant": name, "use_alignment": str(a).lower(), "use_curvature": str(c).lower(),
               "use_hierarchy": str(h).lower(), "status": summary["status"]}
        for key in ("val_loss", "val_accuracy", "val_perplexity"):
            agg = summary["aggregate"].get(key, {})
            row[f"{key}_mean"] = agg.get("mean")
            row[f"{key}_std"] = agg.get("std")
        row["test_accuracy_mean"] = summary["aggregate"].get("test_accuracy", {}).get("mean")
        row["batch_digests"] = ";".join(s["batch_digest"][:16] for s in summary["seeds"])
        rows.append(row)
    write_csv(out / "ablations.csv", ABLATION_COLUMNS, rows)
    return rows


# --- plot data ---------------------------------------------------------------

PLOT_SCHEMAS = {
    "fig-val-loss.csv": ("run_id", "phase", "step", "epoch", "val_loss", "val_accuracy", "val_perplexity"),
    "fig-grad-norms.csv": ("run_id", "phase", "step", "grad_norm_loss", "grad_norm_alignment", "grad_norm_curvature"),
    "fig-geodesic.csv": ("run_id", "step_from", "step_to", "geodesic_length", "straight_line_length", "ratio"),
}


def _seed_dirs(run_dir: Path):
    dirs = sorted(p.parent for p in run_dir.glob("seed-*/metrics.csv"))
    if not dirs and (run_dir / "metrics.csv").exists():
        dirs = [run_dir]
    if not dirs:
        raise ValidationError(f"{run_dir}: no metrics.csv found")
    return dirs


def emit_plotdata(run_dir, out_dir=None) -> dict:
    """Write one tidy CSV per figure series from a finished run directory."""
    run_dir = Path(run_dir)
    out = Path(out_dir or run_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics, geodesic = [], []
    for d in _seed_dirs(run_dir):
        rows = read_csv(d / "metrics.csv")
        if rows:
            missing = [c for c in METRIC_COLUMNS if c not in rows[0]]
            if missing:
                raise ValidationError(f"{d / 'metrics.csv'}: missing column {missing[0]!r}")
        metrics.extend(rows)
        if (d / "geodesic.csv").exists():
            for row in read_csv(d / "geodesic.csv"):
                if float(row["ratio"]) > 1.0 + 1e-6:
                    raise NumericError(f"{d}: geodesic ratio {row['ratio']} exceeds 1")
                geodesic.append(row)
    written = {}
    for name, rows in (("fig-val-loss.csv", metrics), ("fig-grad-norms.csv", metrics), ("fig-geodesic.csv", geodesic)):
        if name == "fig-geodesic.csv" and not rows:
            continue
        cols = PLOT_SCHEMAS[name]
        write_csv(out / name, cols, [{c: r[c] for c in cols} for r in rows])
        written[name] = out / name
    return written


def load_summary(run_dir) -> dict:
    return json.loads((Path(run_dir) / "summary.json").read_text(encoding="utf-8"))
