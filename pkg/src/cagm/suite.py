"""Built-in report suite: desk-scale analogues of the evaluation tables and figures.

Every cell compares a baseline (plain SGD in both phases) against the
proposed optimizer (alignment plus hierarchy in phase 2, lambda picked by
grid search on validation loss). Reported numbers are test-split means and
standard deviations over the seed list. Everything except files whose name
starts with ``timing`` is a deterministic function of the seed list.
"""

from __future__ import annotations

import json
import math
import shutil
import time
from pathlib import Path

import numpy as np

from cagm import datasets, models
from cagm.config import ExperimentConfig, make_config
from cagm.harness import aggregate, emit_plotdata, grid_search, run_ablations, run_experiment
from cagm.trainer import read_csv, task_for_seed, write_csv, write_json


LAMBDA_GRID = (0.001, 0.01, 0.1)
SIZE_PRESETS = {"small": (16,), "medium": (64, 64), "large": (128, 128, 128)}
SEQ_LENGTHS = (2, 4, 8, 16, 32)
SHIFT_ANGLE = 45.0

CLASSIFY = {
    "task.family": "noisy_classify",
    "task.n_features": 16,
    "task.n_classes": 4,
    "task.n_train": 400,
    "model.hidden": (32,),
    "opt.eta": 0.1,
    "protocol.batch_size": 32,
    "protocol.phase1_steps": 200,
    "protocol.phase2_steps": 200,
    "protocol.eval_every": 50,
    "protocol.checkpoint_every": 200,
}

MARKOV = {
    "task.family": "markov_lang",
    "task.n_train": 2000,
    "task.n_val": 500,
    "task.n_test": 500,
    "model.embed_dim": 16,
    "model.hidden": (32,),
    "model.window": 1,
    "opt.eta": 0.3,
    "protocol.batch_size": 64,
    "protocol.phase1_steps": 300,
    "protocol.phase2_steps": 300,
    "protocol.eval_every": 100,
    "protocol.checkpoint_every": 300,
}

# Five synthetic languages standing in for unnamed corpora: vocabulary size
# and transition sparsity vary, so the optimal perplexity differs per row.
MARKOV_PRESETS = {
    "A": {"task.vocab": 16, "task.concentration": 0.3},
    "B": {"task.vocab": 16, "task.concentration": 1.0},
    "C": {"task.vocab": 24, "task.concentration": 0.5},
    "D": {"task.vocab": 32, "task.concentration": 0.3},
    "E": {"task.vocab": 32, "task.concentration": 1.0},
}

LONG_RANGE = {
    "task.family": "long_range_seq",
    "task.vocab": 16,
    "task.n_classes": 4,
    "task.n_train": 400,
    "model.embed_dim": 16,
    "model.hidden": (32,),
    "model.window": 64,
    "opt.eta": 0.3,
    "protocol.batch_size": 32,
    "protocol.phase1_steps": 200,
    "protocol.phase2_steps": 200,
    "protocol.eval_every": 100,
    "protocol.checkpoint_every": 200,
}

# Small enough (30 parameters) for finite-difference curvature and geodesics.
TINY = {
    "task.family": "noisy_classify",
    "task.n_features": 4,
    "task.n_classes": 2,
    "task.n_train": 200,
    "task.n_val": 100,
    "task.n_test": 100,
    "model.hidden": (4,),
    "opt.eta": 0.2,
    "opt.lambda": 0.01,
    "opt.mu": 1e-4,
    "embed.dim": 2,
    "embed.hierarchy_dims": (1,),
    "protocol.batch_size": 32,
    "protocol.phase1_steps": 60,
    "protocol.phase2_steps": 40,
    "protocol.eval_every": 20,
    "protocol.checkpoint_every": 20,
}

TABLE_COLUMNS = ("row", "baseline_mean", "baseline_std", "proposed_mean", "proposed_std", "n_seeds", "lambda")


class _Suite:
    def __init__(self, out_dir, seeds):
        self.out = Path(out_dir)
        self.seeds = tuple(int(s) for s in seeds)
        self.selected: dict[str, dict] = {}
        self.timing: list[dict] = []

    def config(self, values: dict) -> ExperimentConfig:
        return make_config({**values, "run.seeds": self.seeds, "run.out": str(self.out)})

    def compare(self, name: str, values: dict) -> dict:
        """Baseline and grid-tuned proposed runs for one table cell."""
        cell_dir = self.out / "runs" / name
        cfg = self.config(values)
        started = time.perf_counter()
        base_cfg = cfg.with_values(**{"opt.lambda": 0.0, "opt.mu": 0.0})
        base = run_experiment(base_cfg, cell_dir / "baseline", resume=False)
        base_ms = 1000.0 * (time.perf_counter() - started)
        prop_cfg = cfg.with_values(**{
            "opt.use_alignment": True, "opt.use_hierarchy": True, "opt.use_curvature": False,
            "opt.mu": 0.0, "grid.lambda": LAMBDA_GRID,
        })
        started = time.perf_counter()
        best, rows = grid_search(prop_cfg, cell_dir / "proposed-grid")
        prop_ms = 1000.0 * (time.perf_counter() - started)
        if best is None:
            prop, lam = None, None
        else:
            lam = best.values["opt.lambda"]
            idx = next(r["cell"] for r in rows if r["lambda"] == lam)
            prop = _load(cell_dir / "proposed-grid" / f"cell-{idx}" / "summary.json")
        self.selected[name] = {
            "eta": cfg.values["opt.eta"], "batch_size": cfg.values["protocol.batch_size"], "lambda": lam,
            "grid": [{"lambda": r["lambda"], "status": r["status"], "val_loss_mean": r["val_loss_mean"]} for r in rows],
        }
        self.timing.append({"cell": name, "baseline_wall_ms": base_ms, "proposed_grid_wall_ms": prop_ms})
        return {"baseline": base, "proposed": prop, "lambda": lam, "dir": cell_dir, "cfg": cfg}

    def table(self, filename, rows):
        write_csv(self.out / filename, TABLE_COLUMNS, rows)


def _load(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _agg(summary, key):
    if summary is None:
        return {"mean": None, "std": None, "n": 0}
    return summary["aggregate"].get(key, {"mean": None, "std": None, "n": 0})


def _row(label, cell, key, scale=1.0):
    b, p = _agg(cell["baseline"], key), _agg(cell["proposed"], key)

    def s(v):
        return None if v is None else v * scale

    return {
        "row": label, "baseline_mean": s(b["mean"]), "baseline_std": s(b["std"]),
        "proposed_mean": s(p["mean"]), "proposed_std": s(p["std"]), "n_seeds": b["n"], "lambda": cell["lambda"],
    }


def _epoch_series(cell, method, steps_per_epoch):
    """Mean and std of validation loss over seeds at each whole-epoch step."""
    summary = cell[method]
    if summary is None:
        return []
    base = cell["dir"] / "baseline" if method == "baseline" else (
        cell["dir"] / "proposed-grid" / _best_cell_dir(cell)
    )
    by_step: dict[int, list[float]] = {}
    phases: dict[int, int] = {}
    for seed in summary["seeds"]:
        for r in read_csv(base / f"seed-{seed['seed']}" / "metrics.csv"):
            step = int(r["step"])
            if step % steps_per_epoch == 0:
                by_step.setdefault(step, []).append(float(r["val_loss"]))
                phases[step] = int(r["phase"])
    out = []
    for step in sorted(by_step):
        agg = aggregate(by_step[step])
        out.append({"method": method, "epoch": step // steps_per_epoch, "step": step, "phase": phases[step],
                    "val_loss_mean": agg["mean"], "val_loss_std": agg["std"], "n_seeds": agg["n"]})
    return out


def _best_cell_dir(cell):
    grid = _load(cell["dir"] / "proposed-grid" / "grid.json")
    return f"cell-{grid['best_cell']}"


def run_paper_suite(out_dir, seeds=(0, 1, 2)) -> dict:
    """Run every report and write the CSVs plus ``summary.json`` into ``out_dir``."""
    out = Path(out_dir)
    if (out / "runs").exists():
        shutil.rmtree(out / "runs")
    out.mkdir(parents=True, exist_ok=True)
    suite = _Suite(out, seeds)
    started = time.perf_counter()

    # language modelling perplexity on five synthetic languages
    rows, cells = [], {}
    for name, preset in MARKOV_PRESETS.items():
        cell = suite.compare(f"table1-{name}", {**MARKOV, **preset})
        cells[name] = cell
        row = _row(f"dataset {name}", cell, "test_perplexity")
        row["optimal_perplexity"] = _agg(cell["baseline"], "optimal_perplexity")["mean"]
        rows.append(row)
    write_csv(out / "table1-perplexity.csv", (*TABLE_COLUMNS, "optimal_perplexity"), rows)

    # robustness to label-independent input noise
    noise_cells = {}
    rows = []
    for level in (0.1, 0.5, 1.0):
        cell = suite.compare(f"table3-noise-{level}", {**CLASSIFY, "task.noise_std": level})
        noise_cells[level] = cell
        rows.append(_row(repr(level), cell, "test_accuracy"))
    suite.table("table3-noise.csv", rows)

    # training-set size
    rows = []
    for frac in (0.25, 0.5, 0.75, 1.0):
        cell = suite.compare(f"table4-size-{int(frac * 100)}", {**CLASSIFY, "task.family": "size_sweep", "task.fraction": frac})
        rows.append(_row(f"{int(frac * 100)}%", cell, "test_accuracy"))
    suite.table("table4-data-size.csv", rows)

    # model size
    rows = []
    for name, hidden in SIZE_PRESETS.items():
        cell = suite.compare(f"table5-model-{name}", {**CLASSIFY, "model.hidden": hidden})
        row = _row(name, cell, "test_accuracy")
        rows.append(row)
    suite.table("table5-model-size.csv", rows)

    # scarce training data on a synthetic language
    rows = []
    for name in ("small", "medium", "large"):
        cell = suite.compare(
            f"table6-low-resource-{name}",
            {**MARKOV, **MARKOV_PRESETS["A"], "task.family": "low_resource", "task.low_resource_family": "markov_lang",
             "task.size_preset": name},
        )
        acc, ppl = _row(name, cell, "test_accuracy"), _row(name, cell, "test_perplexity")
        rows.append({**{k: acc[k] for k in TABLE_COLUMNS},
                     **{f"perplexity_{k}": ppl[k] for k in TABLE_COLUMNS if k.endswith(("_mean", "_std"))}})
    write_csv(out / "table6-low-resource.csv",
              (*TABLE_COLUMNS, "perplexity_baseline_mean", "perplexity_baseline_std",
               "perplexity_proposed_mean", "perplexity_proposed_std"), rows)

    # validation loss per epoch (one evaluation per full pass over train)
    bs, n = CLASSIFY["protocol.batch_size"], CLASSIFY["task.n_train"]
    per_epoch = math.ceil(n / bs)
    epochs = 30
    cell = suite.compare("fig4-val-loss", {
        **CLASSIFY, "protocol.eval_every": per_epoch, "protocol.phase1_steps": per_epoch * epochs // 2,
        "protocol.phase2_steps": per_epoch * epochs // 2, "protocol.checkpoint_every": per_epoch * epochs,
    })
    series = _epoch_series(cell, "baseline", per_epoch) + _epoch_series(cell, "proposed", per_epoch)
    write_csv(out / "fig4-val-loss-per-epoch.csv",
              ("method", "epoch", "step", "phase", "val_loss_mean", "val_loss_std", "n_seeds"), series)

    # source versus target domain accuracy
    cell = suite.compare("fig5-domain-shift", {**CLASSIFY, "task.family": "domain_shift", "task.shift_angle": SHIFT_ANGLE})
    write_csv(out / "fig5-domain-shift.csv", TABLE_COLUMNS,
              [_row("source", cell, "test_accuracy"), _row("target", cell, "target_accuracy")])

    # accuracy against sequence length
    rows = []
    for length in SEQ_LENGTHS:
        cell = suite.compare(f"fig7-seq-len-{length}", {**LONG_RANGE, "task.seq_len": length})
        rows.append(_row(str(length), cell, "test_accuracy"))
        if length == 8:
            long_cell = cell
    suite.table("fig7-seq-length.csv", rows)

    # accuracy across task types
    suite.table("fig3-task-accuracy.csv", [
        _row("classification", noise_cells[0.5], "test_accuracy"),
        _row("long-range sequence", long_cell, "test_accuracy"),
        _row("next-token prediction", cells["A"], "test_accuracy"),
    ])

    # cost proxies: counted flops and estimated memory are deterministic
    rows = _cost_rows(noise_cells[0.5])
    write_csv(out / "table2-cost.csv", ("metric", "baseline", "proposed"), rows)

    # geodesic diagnostics between checkpoints on a tiny model
    geo_cfg = suite.config({**TINY, "opt.use_hierarchy": True, "protocol.geodesic_hook": True, "opt.mu": 0.0})
    geo_dir = out / "runs" / "fig-geodesic"
    run_experiment(geo_cfg, geo_dir, resume=False)
    emit_plotdata(geo_dir, geo_dir)
    shutil.copyfile(geo_dir / "fig-geodesic.csv", out / "fig-geodesic.csv")

    # component ablations (curvature needs the tiny model)
    abl = run_ablations(suite.config(TINY), out / "runs" / "ablations")
    shutil.copyfile(out / "runs" / "ablations" / "ablations.csv", out / "ablations.csv")

    suite.timing.append({"cell": "total", "baseline_wall_ms": 1000.0 * (time.perf_counter() - started),
                         "proposed_grid_wall_ms": None})
    write_csv(out / "timing-suite.csv", ("cell", "baseline_wall_ms", "proposed_grid_wall_ms"), suite.timing)
    write_csv(out / "timing-inference.csv", ("method", "ms_per_example"), _inference_timing(noise_cells[0.5]))

    summary = {
        "seeds": list(suite.seeds),
        "lambda_grid": list(LAMBDA_GRID),
        "selected_hyperparameters": suite.selected,
        "ablation_rows": len(abl),
        "reports": sorted(p.name for p in out.glob("*.csv") if not p.name.startswith("timing")),
    }
    write_json(out / "summary.json", summary)
    return summary


def _cost_rows(cell):
    cfg = cell["cfg"]
    spec = cfg.model
    out = []
    vals = {}
    for method in ("baseline", "proposed"):
        run_dir = cell["dir"] / "baseline" if method == "baseline" else cell["dir"] / "proposed-grid" / _best_cell_dir(cell)
        seed = cell[method]["seeds"][0]["seed"]
        last = read_csv(run_dir / f"seed-{seed}" / "metrics.csv")[-1]
        vals[method] = {
            "training_flops_est": int(last["flops_est"]),
            "peak_memory_est_bytes": int(last["peak_mem_est_bytes"]),
            "inference_flops_per_example": models.flops_per_example(spec),
            "n_params": models.n_params(spec),
        }
    for metric in vals["baseline"]:
        out.append({"metric": metric, "baseline": vals["baseline"][metric], "proposed": vals["proposed"][metric]})
    return out


def _inference_timing(cell, repeats=20):
    """Wall-clock per test example; not deterministic, kept out of the reports."""
    cfg = cell["cfg"]
    seed = cfg.seeds[0]
    test = datasets.generate(task_for_seed(cfg, seed)).test
    spec = cfg.model.with_seed(seed)
    rows = []
    for method in ("baseline", "proposed"):
        run_dir = cell["dir"] / "baseline" if method == "baseline" else cell["dir"] / "proposed-grid" / _best_cell_dir(cell)
        ckpts = sorted((run_dir / f"seed-{seed}").glob("checkpoint-*.json"), key=lambda p: int(p.stem.split("-")[1]))
        w = np.array(_load(ckpts[-1])["params"])
        started = time.perf_counter()
        for _ in range(repeats):
            models.predict(w, test, spec)
        rows.append({"method": method, "ms_per_example": 1000.0 * (time.perf_counter() - started) / (repeats * len(test))})
    return rows
