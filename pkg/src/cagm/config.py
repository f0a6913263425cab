"""Experiment configuration: a flat ``key = value`` text format.

One setting per line, ``#`` starts a comment. Keys are dotted
(``opt.eta``), values are typed by the key table below: ints, floats,
``true``/``false``, bare or quoted strings, and comma-separated lists
(an empty value is an empty list). Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from cagm.datasets import TaskSpec
from cagm.embed import MANIFOLD_MODES, check_level_dims
from cagm.errors import ValidationError
from cagm.models import ModelSpec
from cagm.optimizer import OptimizerConfig


class ConfigError(ValidationError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


INT, FLOAT, BOOL, STR, INTS, FLOATS = "int", "float", "bool", "str", "ints", "floats"

# key -> (type, default)
KEYS: dict[str, tuple[str, object]] = {
    "task.family": (STR, "noisy_classify"),
    "task.n_features": (INT, 16),
    "task.n_classes": (INT, 4),
    "task.vocab": (INT, 16),
    "task.n_train": (INT, 400),
    "task.n_val": (INT, 200),
    "task.n_test": (INT, 200),
    "task.noise_std": (FLOAT, 0.5),
    "task.separation": (FLOAT, 2.0),
    "task.shift_angle": (FLOAT, 0.0),
    "task.shift_translation": (FLOAT, 0.0),
    "task.fraction": (FLOAT, 1.0),
    "task.seq_len": (INT, 8),
    "task.seq_lengths": (INTS, ()),
    "task.chain": (STR, "dirichlet"),
    "task.concentration": (FLOAT, 0.5),
    "task.context": (INT, 1),
    "task.size_preset": (STR, "small"),
    "task.low_resource_family": (STR, "markov_lang"),
    "task.augment_swap": (BOOL, False),
    "task.seed": (INT, 0),
    "model.architecture": (STR, "auto"),
    "model.hidden": (INTS, (32,)),
    "model.embed_dim": (INT, 16),
    "model.activation": (STR, "tanh"),
    "model.window": (INT, 1),
    "opt.eta": (FLOAT, 0.1),
    "opt.lambda": (FLOAT, 0.01),
    "opt.mu": (FLOAT, 0.0),
    "opt.gamma": (FLOAT, 0.01),
    "opt.sign_mode": (STR, "descent"),
    "opt.use_alignment": (BOOL, True),
    "opt.use_curvature": (BOOL, False),
    "opt.use_hierarchy": (BOOL, False),
    "opt.level_weights": (FLOATS, ()),
    "opt.fd_grad_step": (FLOAT, 1e-5),
    "opt.fd_hess_step": (FLOAT, 1e-3),
    "opt.max_curvature_dim": (INT, 256),
    "embed.dim": (INT, 4),
    "embed.hierarchy_dims": (INTS, (2,)),
    "embed.hidden": (INTS, ()),
    "embed.activation": (STR, "tanh"),
    "embed.steps": (INT, 300),
    "embed.lr": (FLOAT, 0.05),
    "embed.manifold_seed": (INT, 0),
    "embed.manifold_mode": (STR, "orthonormal"),
    "protocol.phase1_steps": (INT, 200),
    "protocol.phase2_steps": (INT, 200),
    "protocol.batch_size": (INT, 32),
    "protocol.eval_every": (INT, 50),
    "protocol.checkpoint_every": (INT, 100),
    "protocol.batching": (STR, "fixed"),
    "protocol.max_tokens": (INT, 256),
    "protocol.geodesic_hook": (BOOL, False),
    "protocol.geodesic_segments": (INT, 16),
    "protocol.geodesic_iters": (INT, 20),
    "protocol.geodesic_max_dim": (INT, 512),
    "grid.eta": (FLOATS, ()),
    "grid.batch_size": (INTS, ()),
    "grid.lambda": (FLOATS, ()),
    "run.seeds": (INTS, (0,)),
    "run.out": (STR, "runs/default"),
}


def _parse_scalar(key, kind, text):
    text = text.strip()
    try:
        if kind == INT:
            return int(text)
        if kind == FLOAT:
            return float(text)
    except ValueError:
        raise ConfigError(key, f"expected {kind}, got {text!r}") from None
    if kind == BOOL:
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(key, f"expected true/false, got {text!r}")
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def parse_value(key: str, text: str):
    if key not in KEYS:
        raise ConfigError(key, "unknown key")
    kind = KEYS[key][0]
    if kind in (INTS, FLOATS):
        items = [t for t in text.replace("[", "").replace("]", "").split(",") if t.strip()]
        return tuple(_parse_scalar(key, INT if kind == INTS else FLOAT, t) for t in items)
    return _parse_scalar(key, kind, text)


def format_value(key: str, value) -> str:
    kind = KEYS[key][0]
    if kind in (INTS, FLOATS):
        return ", ".join(format_value_scalar(v) for v in value)
    return format_value_scalar(value)


def format_value_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(key, f"duplicate key on line {lineno}")
        values[key] = parse_value(key, val)
    return values


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 4
    hierarchy_dims: tuple[int, ...] = (2,)
    hidden: tuple[int, ...] = ()
    activation: str = "tanh"
    steps: int = 300
    lr: float = 0.05
    manifold_seed: int = 0
    manifold_mode: str = "orthonormal"

    @property
    def level_dims(self) -> tuple[int, ...]:
        return (self.dim, *self.hierarchy_dims)


@dataclass(frozen=True)
class ProtocolConfig:
    phase1_steps: int = 200
    phase2_steps: int = 200
    batch_size: int = 32
    eval_every: int = 50
    checkpoint_every: int = 100
    batching: str = "fixed"
    max_tokens: int = 256
    geodesic_hook: bool = False
    geodesic_segments: int = 16
    geodesic_iters: int = 20
    geodesic_max_dim: int = 512


@dataclass(frozen=True)
class GridConfig:
    eta: tuple[float, ...] = ()
    batch_size: tuple[int, ...] = ()
    lam: tuple[float, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # flat key -> value, every key present

    # typed views, rebuilt on demand
    @property
    def task(self) -> TaskSpec:
        return TaskSpec(**{k[5:]: v for k, v in self.values.items() if k.startswith("task.")})

    @property
    def model(self) -> ModelSpec:
        v = self.values
        task = self.task
        arch = v["model.architecture"]
        if arch == "auto":
            arch = "seq_model" if task.family in ("long_range_seq", "markov_lang") or (
                task.family == "low_resource" and task.low_resource_family == "markov_lang"
            ) else "mlp_classifier"
        hidden = tuple(v["model.hidden"])
        if arch == "seq_model":
            widths = (v["model.embed_dim"], *hidden, task.vocab)
            return ModelSpec(arch, widths, v["model.activation"], vocab=task.vocab, window=v["model.window"])
        if arch == "mlp_classifier":
            return ModelSpec(arch, (task.n_features, *hidden, task.n_classes), v["model.activation"])
        raise ConfigError("model.architecture", f"{arch!r} does not fit task family {task.family!r}")

    @property
    def optimizer(self) -> OptimizerConfig:
        v = self.values
        return OptimizerConfig(
            eta=v["opt.eta"],
            lam=v["opt.lambda"],
            mu=v["opt.mu"],
            gamma=v["opt.gamma"],
            sign_mode=v["opt.sign_mode"],
            use_alignment=v["opt.use_alignment"],
            use_curvature=v["opt.use_curvature"],
            use_hierarchy=v["opt.use_hierarchy"],
            level_weights=tuple(v["opt.level_weights"]),
            fd_grad_step=v["opt.fd_grad_step"],
            fd_hess_step=v["opt.fd_hess_step"],
            max_curvature_dim=v["opt.max_curvature_dim"],
        )

    @property
    def embed(self) -> EmbedConfig:
        return EmbedConfig(**{k[6:]: v for k, v in self.values.items() if k.startswith("embed.")})

    @property
    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig(**{k[9:]: v for k, v in self.values.items() if k.startswith("protocol.")})

    @property
    def grid(self) -> GridConfig:
        v = self.values
        return GridConfig(v["grid.eta"], v["grid.batch_size"], v["grid.lambda"])

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(self.values["run.seeds"])

    @property
    def out(self) -> str:
        return self.values["run.out"]

    def with_values(self, **updates) -> "ExperimentConfig":
        """``cfg.with_values(**{"opt.eta": 0.2})``; re-validated."""
        merged = dict(self.values)
        for key, val in updates.items():
            if key not in KEYS:
                raise ConfigError(key, "unknown key")
            merged[key] = val
        return make_config(merged)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(k, self.values[k])}\n" for k in KEYS)

    def digest(self, exclude=("run.seeds", "run.out")) -> str:
        """Hash of every setting that affects a single-seed run."""
        canon = "".join(f"{k}={format_value(k, self.values[k])}\n" for k in KEYS if k not in exclude)
        return hashlib.sha256(canon.encode()).hexdigest()


def _wrap(section, fn):
    """Re-raise validation failures from a typed view as a keyed ConfigError."""
    try:
        return fn()
    except ConfigError:
        raise
    except (ValidationError, TypeError) as exc:
        msg = str(exc)
        named = [tok.rstrip(":;.") for tok in msg.replace(",", " ").split() if tok.startswith(section)]
        raise ConfigError(named[0] if named else section.rstrip("."), msg) from None


def make_config(values: dict | None = None) -> ExperimentConfig:
    merged = {k: d for k, (_, d) in KEYS.items()}
    for key, val in (values or {}).items():
        if key not in KEYS:
            raise ConfigError(key, "unknown key")
        merged[key] = val
    cfg = ExperimentConfig(merged)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    _wrap("task.", lambda: cfg.task)
    _wrap("model.", lambda: cfg.model)
    _wrap("opt.", lambda: cfg.optimizer)
    v = cfg.values
    try:
        check_level_dims(cfg.embed.level_dims)
    except ValidationError as exc:
        raise ConfigError("embed.hierarchy_dims", str(exc)) from None
    if v["embed.manifold_mode"] not in MANIFOLD_MODES:
        raise ConfigError("embed.manifold_mode", f"must be one of {MANIFOLD_MODES}")
    if v["embed.steps"] < 1 or v["embed.lr"] <= 0:
        raise ConfigError("embed.steps", "embed.steps must be >= 1 and embed.lr > 0")
    for key in ("protocol.phase1_steps", "protocol.phase2_steps"):
        if v[key] < 0:
            raise ConfigError(key, "must be >= 0")
    for key in ("protocol.batch_size", "protocol.eval_every", "protocol.checkpoint_every",
                "protocol.max_tokens", "protocol.geodesic_segments"):
        if v[key] < 1:
            raise ConfigError(key, "must be >= 1")
    if v["protocol.batching"] not in ("fixed", "dynamic"):
        raise ConfigError("protocol.batching", "must be 'fixed' or 'dynamic'")
    if not v["run.seeds"]:
        raise ConfigError("run.seeds", "needs at least one seed")
    if v["opt.use_hierarchy"] and v["opt.level_weights"] and len(v["opt.level_weights"]) != len(cfg.embed.level_dims):
        raise ConfigError("opt.level_weights", "needs one weight per hierarchy level")
    if any(x <= 0 for x in v["grid.eta"]) or any(x < 1 for x in v["grid.batch_size"]) or any(
        x < 0 for x in v["grid.lambda"]
    ):
        raise ConfigError("grid", "grid values out of range")


def load_config(path) -> ExperimentConfig:
    return make_config(parse_text(Path(path).read_text(encoding="utf-8")))


__all__ = [
    "ConfigError",
    "EmbedConfig",
    "ExperimentConfig",
    "GridConfig",
    "KEYS",
    "ProtocolConfig",
    "load_config",
    "make_config",
    "parse_text",
]
