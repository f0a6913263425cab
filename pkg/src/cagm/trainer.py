"""Single-seed training runs under the two-phase protocol.

Phase 1 is plain SGD. At the phase boundary the embedding nets are fitted
on the training inputs and phase 2 continues from the phase-1 weights
with the configured context-aligned step. Checkpoints are JSON files
holding everything needed to resume bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from cagm import datasets, models
from cagm.config import ExperimentConfig
from cagm.embed import (
    EmbeddingLevel,
    EmbedNet,
    ManifoldMap,
    context_embedding,
    fit_levels,
    make_manifold_map,
)
from cagm.errors import NumericError, ValidationError
from cagm.linalg import PcaModel
from cagm.optimizer import apply_step, geodesic_diagnostics, geodesic_path, step_terms

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = (
    "run_id", "phase", "step", "epoch", "train_loss", "val_loss", "val_accuracy", "val_perplexity",
    "grad_norm_loss", "grad_norm_alignment", "grad_norm_curvature", "flops_est", "peak_mem_est_bytes",
)
TIMING_COLUMNS = ("run_id", "step", "wall_ms")
GEODESIC_COLUMNS = ("run_id", "step_from", "step_to", "geodesic_length", "straight_line_length", "ratio")


def derive_seed(*parts: int) -> int:
    """Mix integers into one 63-bit seed."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(columns)
        for row in rows:
            out.writerow([fmt(row.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# --- checkpoints -----------------------------------------------------------


def _levels_to_json(levels):
    if levels is None:
        return None
    return [
        {
            "pca_mean": lv.pca.mean.tolist(),
            "pca_components": lv.pca.components.tolist(),
            "pca_variance": lv.pca.explained_variance.tolist(),
            "net_theta": lv.net.theta.tolist(),
            "net_widths": list(lv.net.spec.widths),
            "net_activation": lv.net.spec.activation,
            "net_seed": lv.net.spec.seed,
            "net_objective": lv.net.objective,
        }
        for lv in levels
    ]


def _levels_from_json(data):
    if data is None:
        return None
    out = []
    for item in data:
        pca = PcaModel(
            np.array(item["pca_mean"], dtype=np.float64),
            np.array(item["pca_components"], dtype=np.float64),
            np.array(item["pca_variance"], dtype=np.float64),
        )
        spec = models.ModelSpec("mlp_regressor", tuple(item["net_widths"]), item["net_activation"], seed=item["net_seed"])
        net = EmbedNet(np.array(item["net_theta"], dtype=np.float64), spec, item["net_objective"])
        out.append(EmbeddingLevel(pca, net))
    return out


def optimizer_hash(cfg: ExperimentConfig) -> str:
    text = "".join(f"{k}={v!r}\n" for k, v in sorted(cfg.values.items()) if k.startswith("opt."))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class RunState:
    step: int
    w: np.ndarray
    rng_state: dict  # batch-order stream, captured just before drawing the current epoch plan
    epoch: int
    batch_pos: int
    levels: list | None
    batch_digest: str
    loss_sum: float
    loss_count: int
    last_ckpt_step: int | None


def save_checkpoint(path, state: RunState, cfg: ExperimentConfig, seed: int, config_digest: str, phase: int):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "seed": seed,
        "step": state.step,
        "phase": phase,
        "params": state.w.tolist(),
        "embed": _levels_to_json(state.levels),
        "optimizer_hash": optimizer_hash(cfg),
        "rng_state": state.rng_state,
        "epoch": state.epoch,
        "batch_pos": state.batch_pos,
        "batch_digest": state.batch_digest,
        "loss_sum": state.loss_sum,
        "loss_count": state.loss_count,
        "last_ckpt_step": state.last_ckpt_step,
        "config_digest": config_digest,
    }
    write_json(path, payload)


def load_checkpoint(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint format {data.get('format_version')!r}")
    return data


def state_from_checkpoint(data: dict) -> RunState:
    return RunState(
        step=data["step"],
        w=np.array(data["params"], dtype=np.float64),
        rng_state=data["rng_state"],
        epoch=data["epoch"],
        batch_pos=data["batch_pos"],
        levels=_levels_from_json(data["embed"]),
        batch_digest=data["batch_digest"],
        loss_sum=data["loss_sum"],
        loss_count=data["loss_count"],
        last_ckpt_step=data["last_ckpt_step"],
    )


def checkpoint_path(run_dir, step: int) -> Path:
    return Path(run_dir) / f"checkpoint-{step}.json"


def latest_checkpoint(run_dir) -> Path | None:
    found = sorted(Path(run_dir).glob("checkpoint-*.json"), key=lambda p: int(p.stem.split("-")[1]))
    return found[-1] if found else None


# --- the run ---------------------------------------------------------------


def seed_config_digest(cfg: ExperimentConfig, seed: int) -> str:
    return hashlib.sha256(f"{cfg.digest()}:{seed}".encode()).hexdigest()


def task_for_seed(cfg: ExperimentConfig, seed: int) -> datasets.TaskSpec:
    return replace(cfg.task, seed=derive_seed(cfg.task.seed, seed))


class _Run:
    def __init__(self, cfg: ExperimentConfig, seed: int, run_dir):
        self.cfg = cfg
        self.seed = seed
        self.run_dir = Path(run_dir)
        self.run_id = f"seed-{seed}"
        self.proto = cfg.protocol
        self.opt = cfg.optimizer
        self.base_opt = replace(self.opt, lam=0.0, mu=0.0)
        self.task = task_for_seed(cfg, seed)
        if self.task.family == "domain_shift":
            self.split, self.target = datasets.gen_domain_shift(self.task)
        else:
            self.split, self.target = datasets.generate(self.task), None
        self.spec = cfg.model.with_seed(seed)
        self.dim = models.n_params(self.spec)
        self.digest = seed_config_digest(cfg, seed)
        self.total = self.proto.phase1_steps + self.proto.phase2_steps
        self.mmap: ManifoldMap | None = None
        self.metrics: list[dict] = []
        self.timing: list[dict] = []
        self.geodesics: list[dict] = []
        if self.split.train.kind == "sequence":
            longest = int(self.split.train.lengths.max())
            if self.spec.window < longest and self.task.family == "long_range_seq":
                log.warning(
                    "window %d is shorter than sequences of length %d; the first token falls outside it",
                    self.spec.window, longest,
                )

    # data order
    def _plan(self, rng):
        train = self.split.train
        if self.proto.batching == "dynamic":
            return datasets.dynamic_batch_plan(train.lengths, self.proto.max_tokens, rng)
        perm = rng.permutation(len(train))
        bs = self.proto.batch_size
        return [perm[i : i + bs] for i in range(0, len(perm), bs)]

    def _features(self, batch):
        return batch.features(self.spec.vocab if batch.kind == "sequence" else None)

    def _need_embeddings(self) -> bool:
        return self.proto.phase2_steps > 0 and self.opt.alignment_on

    def _fit_embeddings(self):
        ec = self.cfg.embed
        dims = ec.level_dims if self.opt.use_hierarchy else ec.level_dims[:1]
        return fit_levels(
            self._features(self.split.train), dims, ec.hidden, ec.activation, ec.steps, ec.lr,
            seed=derive_seed(self.seed, 101),
        )

    def _context(self, batch, levels):
        feats = self._features(batch)
        return [context_embedding(lv.net, feats) for lv in levels]

    def _flops_per_step(self, batch_len, phase):
        flops = models.flops_per_example(self.spec) * batch_len
        if phase == 2 and self.opt.alignment_on and self.mmap is not None:
            flops += 2 * self.dim * sum(p.shape[0] for p in self.mmap.levels)
        if phase == 2 and self.opt.curvature_on:
            per_loss = 2 * models.flops_per_example(self.spec) * batch_len
            flops += 4 * self.dim * self.dim * per_loss
        return flops

    def _mem_estimate(self, phase):
        acts = self.proto.batch_size * sum(self.spec.widths) * 2
        extra = 0
        if phase == 2 and self.mmap is not None:
            extra = self.dim * sum(p.shape[0] for p in self.mmap.levels)
        return 8 * (3 * self.dim + acts + extra)

    def _evaluate(self, w, batch):
        out = {"val_loss": models.loss(w, batch, self.spec)}
        if not np.isfinite(out["val_loss"]):
            raise NumericError("validation loss is non-finite")
        out["val_accuracy"] = models.accuracy(w, batch, self.spec)
        out["val_perplexity"] = float(np.exp(out["val_loss"])) if batch.kind == "sequence" else None
        return out

    def _geodesic(self, w_from, w_to, step_from, step_to):
        if self.dim > self.proto.geodesic_max_dim:
            return
        obj = models.bind(self.spec, self.split.val)
        path = geodesic_path(
            w_from, w_to, obj, self.opt.gamma, segments=self.proto.geodesic_segments,
            iters=self.proto.geodesic_iters, h=self.opt.fd_hess_step,
        )
        diag = geodesic_diagnostics(path, obj, self.opt.gamma, self.opt.fd_hess_step)
        self.geodesics.append({"run_id": self.run_id, "step_from": step_from, "step_to": step_to, **diag})

    def _fresh_state(self):
        rng = np.random.Generator(np.random.PCG64(derive_seed(self.seed, 7)))
        return RunState(
            step=0, w=models.init_params(self.spec), rng_state=rng.bit_generator.state, epoch=-1,
            batch_pos=0, levels=None, batch_digest=hashlib.sha256(b"").hexdigest(),
            loss_sum=0.0, loss_count=0, last_ckpt_step=None,
        ), rng

    def _restore(self, path):
        data = load_checkpoint(path)
        if data["config_digest"] != self.digest:
            raise ValidationError(f"{path}: checkpoint config digest does not match this run; refusing to resume")
        state = state_from_checkpoint(data)
        rng = np.random.Generator(np.random.PCG64(0))
        rng.bit_generator.state = state.rng_state
        if (self.run_dir / "metrics.csv").exists():
            for row in read_csv(self.run_dir / "metrics.csv"):
                if int(row["step"]) <= state.step:
                    self.metrics.append(_typed_metric_row(row))
        if (self.run_dir / "geodesic.csv").exists():
            for row in read_csv(self.run_dir / "geodesic.csv"):
                if int(row["step_to"]) <= state.step:
                    self.geodesics.append(_typed_geodesic_row(row))
        log.info("resuming %s from step %d", self.run_id, state.step)
        return state, rng

    def _checkpoint(self, state: RunState, phase: int):
        if self.proto.geodesic_hook and state.last_ckpt_step is not None and state.last_ckpt_step != state.step:
            prev = load_checkpoint(checkpoint_path(self.run_dir, state.last_ckpt_step))
            self._geodesic(np.array(prev["params"]), state.w, state.last_ckpt_step, state.step)
        state.last_ckpt_step = state.step
        save_checkpoint(checkpoint_path(self.run_dir, state.step), state, self.cfg, self.seed, self.digest, phase)

    def _write_outputs(self):
        write_csv(self.run_dir / "metrics.csv", METRIC_COLUMNS, self.metrics)
        write_csv(self.run_dir / "timing.csv", TIMING_COLUMNS, self.timing)
        if self.proto.geodesic_hook:
            write_csv(self.run_dir / "geodesic.csv", GEODESIC_COLUMNS, self.geodesics)

    def run(self, resume=True, stop_after=None) -> dict:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        ckpt = latest_checkpoint(self.run_dir) if resume else None
        state, rng = self._restore(ckpt) if ckpt else self._fresh_state()
        plan = None
        if state.epoch >= 0:
            rng.bit_generator.state = state.rng_state
            plan = self._plan(rng)
        if state.levels is not None:
            self.mmap = self._manifold(state.levels)

        result = {"seed": self.seed, "run_id": self.run_id, "status": "ok", "error": None,
                  "n_params": self.dim, "config_digest": self.digest}
        started = time.perf_counter()
        last_norms = {"loss": None, "alignment": None, "curvature": None}
        try:
            if state.step == 0 and ckpt is None and self.proto.phase1_steps == 0:
                self._enter_phase2(state)
            while state.step < self.total:
                if stop_after is not None and state.step >= stop_after:
                    result["status"] = "interrupted"
                    break
                if plan is None or state.batch_pos >= len(plan):
                    state.rng_state = rng.bit_generator.state
                    plan = self._plan(rng)
                    state.epoch += 1
                    state.batch_pos = 0
                idx = plan[state.batch_pos]
                state.batch_pos += 1
                batch = self.split.train.take(idx)
                phase = 1 if state.step < self.proto.phase1_steps else 2
                opt = self.base_opt if phase == 1 else self.opt
                e_c = self._context(batch, state.levels) if opt.alignment_on else None
                terms = step_terms(state.w, models.bind(self.spec, batch), e_c, opt, self.mmap)
                state.w = apply_step(state.w, terms, opt)
                state.step += 1
                state.loss_sum += terms.loss
                state.loss_count += 1
                state.batch_digest = hashlib.sha256(
                    state.batch_digest.encode() + np.asarray(idx, dtype="<i8").tobytes()
                ).hexdigest()
                last_norms = terms.norms

                boundary = state.step == self.proto.phase1_steps
                if state.step % self.proto.eval_every == 0 or boundary or state.step == self.total:
                    self._log_row(state, plan, phase, last_norms)
                    self.timing.append({"run_id": self.run_id, "step": state.step,
                                        "wall_ms": 1000.0 * (time.perf_counter() - started)})
                if state.step % self.proto.checkpoint_every == 0 or boundary or state.step == self.total:
                    if boundary:
                        result["phase1_params"] = state.w.copy()
                        self._enter_phase2(state)
                    self._checkpoint(state, phase)
        except NumericError as exc:
            result["status"] = "failed"
            result["error"] = str(exc)
            log.warning("%s failed at step %d: %s", self.run_id, state.step, exc)
        self._write_outputs()

        result["steps"] = state.step
        result["batch_digest"] = state.batch_digest
        result["params"] = state.w
        if result["status"] == "ok":
            result["final"] = self._final_metrics(state.w)
        return result

    def _log_row(self, state, plan, phase, norms):
        mean_loss = state.loss_sum / max(state.loss_count, 1)
        state.loss_sum, state.loss_count = 0.0, 0
        row = {
            "run_id": self.run_id, "phase": phase, "step": state.step,
            "epoch": state.epoch + state.batch_pos / len(plan),
            "train_loss": mean_loss,
            "grad_norm_loss": norms["loss"], "grad_norm_alignment": norms["alignment"],
            "grad_norm_curvature": norms["curvature"],
        }
        row.update(self._evaluate(state.w, self.split.val))
        prev = self.metrics[-1]["flops_est"] if self.metrics else 0
        prev_step = self.metrics[-1]["step"] if self.metrics else 0
        per_step = self._flops_per_step(self.proto.batch_size, phase)
        row["flops_est"] = prev + per_step * (state.step - prev_step)
        row["peak_mem_est_bytes"] = self._mem_estimate(phase)
        self.metrics.append(row)

    def _manifold(self, levels):
        ec = self.cfg.embed
        return make_manifold_map(self.dim, [lv.net.out_dim for lv in levels], ec.manifold_seed, ec.manifold_mode)

    def _enter_phase2(self, state):
        if self._need_embeddings() and state.levels is None:
            state.levels = self._fit_embeddings()
            self.mmap = self._manifold(state.levels)

    def _final_metrics(self, w):
        out = {}
        for name, batch in (("val", self.split.val), ("test", self.split.test)):
            ev = self._evaluate(w, batch)
            out[f"{name}_loss"] = ev["val_loss"]
            out[f"{name}_accuracy"] = ev["val_accuracy"]
            out[f"{name}_perplexity"] = ev["val_perplexity"]
        if self.target is not None:
            out["target_accuracy"] = models.accuracy(w, self.target.test, self.spec)
            out["target_loss"] = models.loss(w, self.target.test, self.spec)
        if self.split.info.get("optimal_perplexity") is not None:
            out["optimal_perplexity"] = self.split.info["optimal_perplexity"]
        return out


def _typed_metric_row(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if k == "run_id":
            out[k] = v
        elif k in ("phase", "step", "flops_est", "peak_mem_est_bytes"):
            out[k] = int(v)
        else:
            out[k] = float(v) if v != "" else None
    return out


def _typed_geodesic_row(row: dict) -> dict:
    return {k: (v if k == "run_id" else int(v) if k.startswith("step") else float(v)) for k, v in row.items()}


def train_seed(cfg: ExperimentConfig, seed: int, run_dir, resume: bool = True, stop_after: int | None = None) -> dict:
    """Train one seed into ``run_dir``.

    Writes ``metrics.csv``, ``timing.csv``, ``checkpoint-<step>.json`` and
    (when the geodesic hook is on) ``geodesic.csv``. With ``resume`` the
    latest checkpoint in ``run_dir`` is picked up. ``stop_after`` halts
    once that many steps are done, simulating an interruption.
    """
    # divergence is caught from the losses themselves, so overflow warnings add nothing
    with np.errstate(over="ignore", invalid="ignore"):
        return _Run(cfg, seed, run_dir).run(resume=resume, stop_after=stop_after)
