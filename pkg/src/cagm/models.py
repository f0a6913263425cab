"""Small differentiable models with hand-written backprop.

Parameters live in one flat float64 vector ``w``. Layout, in order:
the token embedding table (``seq_model`` only, vocab x embed_dim), then
for every dense layer its weight matrix (fan_in x fan_out, row-major)
followed by its bias vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cagm.errors import ValidationError

ARCHITECTURES = ("mlp_regressor", "mlp_classifier", "seq_model")
ACTIVATIONS = ("tanh", "relu")
KINDS = ("regression", "classification", "sequence")
PAD = -1

_KIND_FOR_ARCH = {
    "mlp_regressor": "regression",
    "mlp_classifier": "classification",
    "seq_model": "sequence",
}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``widths`` is the full dense chain including input and output sizes. For
    ``seq_model`` the first width is the embedding size and the last must
    equal ``vocab``; ``window`` is how many trailing tokens are mean-pooled.
    """

    architecture: str
    widths: tuple[int, ...]
    activation: str = "tanh"
    vocab: int = 0
    window: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(x) for x in self.widths))
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if len(self.widths) < 2 or any(x < 1 for x in self.widths):
            raise ValidationError(f"widths must be >= 2 positive ints, got {self.widths}")
        if self.architecture == "seq_model":
            if self.vocab < 2:
                raise ValidationError("seq_model needs vocab >= 2")
            if self.widths[-1] != self.vocab:
                raise ValidationError(
                    f"seq_model output width {self.widths[-1]} != vocab {self.vocab}"
                )
            if self.window < 1:
                raise ValidationError("window must be >= 1")

    @property
    def kind(self) -> str:
        return _KIND_FOR_ARCH[self.architecture]

    @property
    def n_inputs(self) -> int:
        return self.vocab if self.architecture == "seq_model" else self.widths[0]

    def with_seed(self, seed: int) -> "ModelSpec":
        return ModelSpec(self.architecture, self.widths, self.activation, self.vocab, self.window, seed)


@dataclass(frozen=True)
class TaskBatch:
    """Inputs and targets for one batch.

    Sequence inputs are int arrays padded on the right with ``PAD``.
    Regression targets are 2-d (batch x outputs); class and token targets
    are 1-d int arrays.
    """

    inputs: np.ndarray
    targets: np.ndarray
    kind: str
    lengths: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown batch kind {self.kind!r}")
        if self.kind == "sequence":
            x = np.asarray(self.inputs, dtype=np.int64)
            if x.ndim != 2:
                raise ValidationError("sequence inputs must be 2-d (batch x length)")
            lengths = (x != PAD).sum(axis=1)
            if np.any(lengths < 1):
                raise ValidationError("every sequence needs at least one token")
            y = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        else:
            x = np.asarray(self.inputs, dtype=np.float64)
            if x.ndim != 2:
                raise ValidationError("feature inputs must be 2-d (batch x features)")
            if not np.all(np.isfinite(x)):
                raise ValidationError("inputs contain non-finite values")
            lengths = np.ones(x.shape[0], dtype=np.int64)
            if self.kind == "regression":
                y = np.asarray(self.targets, dtype=np.float64)
                if y.ndim == 1:
                    y = y[:, None]
            else:
                y = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        if x.shape[0] != y.shape[0] or x.shape[0] == 0:
            raise ValidationError(f"inputs ({x.shape[0]}) and targets ({y.shape[0]}) batch mismatch")
        if self.kind != "regression" and np.any(y < 0):
            raise ValidationError("class/token targets must be non-negative")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "lengths", lengths)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "TaskBatch":
        idx = np.asarray(idx, dtype=np.int64)
        x = self.inputs[idx]
        if self.kind == "sequence":
            # trim trailing all-pad columns so padded token counts stay honest
            width = int(self.lengths[idx].max())
            x = x[:, :width]
        return TaskBatch(x, self.targets[idx], self.kind)

    def features(self, vocab: int | None = None) -> np.ndarray:
        """Dense feature rows: the inputs themselves, or token frequencies."""
        if self.kind != "sequence":
            return self.inputs
        vocab = vocab or int(max(self.inputs.max(), self.targets.max())) + 1
        out = np.zeros((len(self), vocab))
        rows, cols = np.nonzero(self.inputs != PAD)
        np.add.at(out, (rows, self.inputs[rows, cols]), 1.0)
        return out / self.lengths[:, None]


def _dense_shapes(spec: ModelSpec):
    return [(spec.widths[i], spec.widths[i + 1]) for i in range(len(spec.widths) - 1)]


def n_params(spec: ModelSpec) -> int:
    n = spec.vocab * spec.widths[0] if spec.architecture == "seq_model" else 0
    return n + sum(a * b + b for a, b in _dense_shapes(spec))


def _unpack(spec: ModelSpec, w: np.ndarray):
    if w.shape != (n_params(spec),):
        raise ValidationError(f"parameter vector has shape {w.shape}, model needs ({n_params(spec)},)")
    pos = 0
    emb = None
    if spec.architecture == "seq_model":
        size = spec.vocab * spec.widths[0]
        emb = w[:size].reshape(spec.vocab, spec.widths[0])
        pos = size
    layers = []
    for fan_in, fan_out in _dense_shapes(spec):
        W = w[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = w[pos : pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return emb, layers


def init_params(spec: ModelSpec) -> np.ndarray:
    """Glorot-uniform weights, zero biases, drawn from PCG64(spec.seed)."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    parts = []
    if spec.architecture == "seq_model":
        s = np.sqrt(6.0 / (spec.vocab + spec.widths[0]))
        parts.append(rng.uniform(-s, s, size=spec.vocab * spec.widths[0]))
    for fan_in, fan_out in _dense_shapes(spec):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-s, s, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def _check(spec: ModelSpec, batch: TaskBatch):
    if batch.kind != spec.kind:
        raise ValidationError(f"{spec.architecture} expects {spec.kind} batches, got {batch.kind}")
    if batch.kind == "sequence":
        if batch.inputs.max() >= spec.vocab or batch.targets.max() >= spec.vocab:
            raise ValidationError(f"token id out of range for vocab {spec.vocab}")
    else:
        if batch.inputs.shape[1] != spec.widths[0]:
            raise ValidationError(
                f"batch has {batch.inputs.shape[1]} features, model expects {spec.widths[0]}"
            )
        if batch.kind == "classification" and batch.targets.max() >= spec.widths[-1]:
            raise ValidationError("class index out of range")
        if batch.kind == "regression" and batch.targets.shape[1] != spec.widths[-1]:
            raise ValidationError(
                f"regression targets have {batch.targets.shape[1]} columns, model outputs {spec.widths[-1]}"
            )


def _pool_weights(spec: ModelSpec, batch: TaskBatch):
    tokens = batch.inputs
    pos = np.arange(tokens.shape[1])[None, :]
    lengths = batch.lengths[:, None]
    start = np.maximum(lengths - spec.window, 0)
    mask = (pos >= start) & (pos < lengths)
    weights = mask / mask.sum(axis=1, keepdims=True)
    return np.where(tokens == PAD, 0, tokens), weights


def _forward(w, batch: TaskBatch, spec: ModelSpec):
    _check(spec, batch)
    emb, layers = _unpack(spec, np.asarray(w, dtype=np.float64))
    cache = {}
    if emb is not None:
        tok, weights = _pool_weights(spec, batch)
        a = np.einsum("bl,ble->be", weights, emb[tok])
        cache["pool"] = (tok, weights)
    else:
        a = batch.inputs
    acts = [a]
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        if i < len(layers) - 1:
            a = np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)
        else:
            a = z
        acts.append(a)
    cache["acts"] = acts
    cache["layers"] = layers
    return acts[-1], cache


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_and_dout(out, batch: TaskBatch, need_grad: bool):
    m = len(batch)
    if batch.kind == "regression":
        diff = out - batch.targets
        val = float(np.mean(np.sum(diff * diff, axis=1)))
        return val, (2.0 * diff / m if need_grad else None)
    logp = _log_softmax(out)
    val = float(-np.mean(logp[np.arange(m), batch.targets]))
    if not need_grad:
        return val, None
    d = np.exp(logp)
    d[np.arange(m), batch.targets] -= 1.0
    return val, d / m


def loss(w, batch: TaskBatch, spec: ModelSpec) -> float:
    """Mean per-example loss: squared error summed over outputs for
    regression, natural-log cross-entropy otherwise."""
    out, _ = _forward(w, batch, spec)
    return _loss_and_dout(out, batch, need_grad=False)[0]


def loss_and_grad(w, batch: TaskBatch, spec: ModelSpec):
    out, cache = _forward(w, batch, spec)
    val, dz = _loss_and_dout(out, batch, need_grad=True)
    acts, layers = cache["acts"], cache["layers"]
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_in = acts[i]
        grads.append(dz.sum(axis=0))
        grads.append((a_in.T @ dz).reshape(-1))
        da = dz @ W.T
        if i > 0:
            if spec.activation == "tanh":
                dz = da * (1.0 - a_in * a_in)
            else:
                dz = da * (a_in > 0.0)
    grads.reverse()
    if "pool" in cache:
        tok, weights = cache["pool"]
        d_emb = np.zeros((spec.vocab, spec.widths[0]))
        np.add.at(d_emb, tok, weights[:, :, None] * da[:, None, :])
        grads.insert(0, d_emb.reshape(-1))
    return val, np.concatenate(grads)


def loss_grad(w, batch: TaskBatch, spec: ModelSpec) -> np.ndarray:
    return loss_and_grad(w, batch, spec)[1]


def forward(w, batch: TaskBatch, spec: ModelSpec) -> np.ndarray:
    """Raw outputs: regression values or logits."""
    return _forward(w, batch, spec)[0]


def predict(w, batch: TaskBatch, spec: ModelSpec) -> np.ndarray:
    out = forward(w, batch, spec)
    if batch.kind == "regression":
        return out
    return np.argmax(out, axis=1)  # first maximum wins ties


def accuracy(w, batch: TaskBatch, spec: ModelSpec) -> float:
    if batch.kind == "regression":
        raise ValidationError("accuracy is undefined for regression batches")
    return float(np.mean(predict(w, batch, spec) == batch.targets))


def perplexity(w, batch: TaskBatch, spec: ModelSpec) -> float:
    if batch.kind != "sequence":
        raise ValidationError("perplexity needs a sequence batch")
    return float(np.exp(loss(w, batch, spec)))


class ModelObjective:
    """Binds a model and a batch into ``loss(w)`` / ``grad(w)`` callables."""

    def __init__(self, spec: ModelSpec, batch: TaskBatch):
        _check(spec, batch)
        self.spec = spec
        self.batch = batch
        self.dim = n_params(spec)

    def loss(self, w) -> float:
        return loss(w, self.batch, self.spec)

    def grad(self, w) -> np.ndarray:
        return loss_and_grad(w, self.batch, self.spec)[1]

    def loss_and_grad(self, w):
        return loss_and_grad(w, self.batch, self.spec)


def bind(spec: ModelSpec, batch: TaskBatch) -> ModelObjective:
    return ModelObjective(spec, batch)


def flops_per_example(spec: ModelSpec) -> int:
    """Rough multiply-add count of one forward+backward pass."""
    dense = sum(a * b for a, b in _dense_shapes(spec))
    pool = spec.window * spec.widths[0] if spec.architecture == "seq_model" else 0
    return 6 * dense + 2 * pool
