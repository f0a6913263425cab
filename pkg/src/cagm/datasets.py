"""Deterministic synthetic tasks.

Every generator is a pure function of its :class:`TaskSpec`. Randomness
comes from numpy's PCG64 bit generator seeded through ``SeedSequence``;
each split draws from its own child stream so that growing one split
never perturbs another.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from cagm.errors import ValidationError
from cagm.models import PAD, TaskBatch

FAMILIES = ("noisy_classify", "domain_shift", "size_sweep", "long_range_seq", "markov_lang", "low_resource")
CHAINS = ("dirichlet", "uniform", "cycle")
LOW_RESOURCE_SIZES = {"small": 64, "medium": 512, "large": 4096}
NOISE_LEVELS = (0.1, 0.5, 1.0)
SIZE_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class TaskSpec:
    family: str = "noisy_classify"
    n_features: int = 16
    n_classes: int = 4
    vocab: int = 16
    n_train: int = 400
    n_val: int = 200
    n_test: int = 200
    noise_std: float = 0.5
    separation: float = 2.0
    shift_angle: float = 0.0  # degrees
    shift_translation: float = 0.0
    fraction: float = 1.0
    seq_len: int = 8
    seq_lengths: tuple[int, ...] = ()
    chain: str = "dirichlet"
    concentration: float = 0.5
    context: int = 1
    size_preset: str = "small"
    low_resource_family: str = "markov_lang"
    augment_swap: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seq_lengths", tuple(int(x) for x in self.seq_lengths))
        if self.family not in FAMILIES:
            raise ValidationError(f"task.family: unknown task family {self.family!r}")
        for name in ("n_features", "n_classes", "vocab", "n_train", "n_val", "n_test", "context"):
            if getattr(self, name) < 1:
                raise ValidationError(f"task.{name} must be positive")
        if self.noise_std < 0:
            raise ValidationError("task.noise_std must be >= 0")
        if not 0 < self.fraction <= 1:
            raise ValidationError("task.fraction must lie in (0, 1]")
        if self.chain not in CHAINS:
            raise ValidationError(f"task.chain must be one of {CHAINS}")
        if self.size_preset not in LOW_RESOURCE_SIZES:
            raise ValidationError(f"task.size_preset must be one of {tuple(LOW_RESOURCE_SIZES)}")
        if self.low_resource_family not in ("markov_lang", "noisy_classify"):
            raise ValidationError("task.low_resource_family must be markov_lang or noisy_classify")
        if not all(np.isfinite([self.shift_angle, self.shift_translation, self.separation])):
            raise ValidationError("shift parameters must be finite")


@dataclass(frozen=True)
class DatasetSplit:
    train: TaskBatch
    val: TaskBatch
    test: TaskBatch
    spec: TaskSpec
    info: dict = field(default_factory=dict)


def _streams(seed: int):
    """Independent generators: (geometry, train, val, test)."""
    children = np.random.SeedSequence(seed).spawn(4)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


# --- Gaussian classification ----------------------------------------------


def _signal_bits(n_classes: int) -> int:
    return max(1, math.ceil(math.log2(n_classes)))


def class_geometry(spec: TaskSpec):
    """Class means and the orthogonal basis they are expressed in.

    Class ``c`` sits at the hypercube vertex given by the binary code of
    ``c`` (coordinates +-separation/2) inside the first ``bits`` basis
    directions; the basis is a seeded random rotation of R^n_features.
    """
    if spec.n_classes > 2**spec.n_features:
        raise ValidationError(f"{spec.n_classes} classes do not fit on the {spec.n_features}-cube")
    bits = _signal_bits(spec.n_classes)
    if bits > spec.n_features:
        raise ValidationError("not enough features for the class layout")
    geo = _streams(spec.seed)[0]
    basis, r = np.linalg.qr(geo.standard_normal((spec.n_features, spec.n_features)))
    basis = basis * np.where(np.diag(r) < 0, -1.0, 1.0)
    codes = (np.arange(spec.n_classes)[:, None] >> np.arange(bits)[None, :]) & 1
    half = spec.separation / 2.0
    means = (2.0 * codes - 1.0) * half @ basis[:, :bits].T
    return means, basis


def _classify_batch(rng, means, n, noise_std):
    labels = rng.integers(0, means.shape[0], size=n)
    noise = rng.standard_normal((n, means.shape[1]))
    return TaskBatch(means[labels] + noise_std * noise, labels, "classification")


def gen_noisy_classify(spec: TaskSpec) -> DatasetSplit:
    means, basis = class_geometry(spec)
    _, tr, va, te = _streams(spec.seed)
    return DatasetSplit(
        _classify_batch(tr, means, spec.n_train, spec.noise_std),
        _classify_batch(va, means, spec.n_val, spec.noise_std),
        _classify_batch(te, means, spec.n_test, spec.noise_std),
        spec,
        {"means": means, "basis": basis},
    )


def shift_transform(spec: TaskSpec):
    """Rotation (in the plane of the first two signal directions) and
    translation (along the first one) mapping source to target inputs."""
    _, basis = class_geometry(spec)
    if spec.n_features < 2:
        raise ValidationError("domain shift needs n_features >= 2")
    u, v = basis[:, 0], basis[:, 1]
    theta = math.radians(spec.shift_angle)
    rot = (
        np.eye(spec.n_features)
        + (math.cos(theta) - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + math.sin(theta) * (np.outer(v, u) - np.outer(u, v))
    )
    return rot, spec.shift_translation * u


def gen_domain_shift(spec: TaskSpec):
    source = gen_noisy_classify(spec)
    if spec.shift_angle == 0 and spec.shift_translation == 0:
        return source, source
    rot, shift = shift_transform(spec)

    def move(b: TaskBatch) -> TaskBatch:
        return TaskBatch(b.inputs @ rot.T + shift, b.targets, b.kind)

    info = dict(source.info, rotation=rot, translation=shift, means=source.info["means"] @ rot.T + shift)
    target = DatasetSplit(move(source.train), move(source.val), move(source.test), spec, info)
    return source, target


def gen_size_sweep(spec: TaskSpec, fraction: float | None = None) -> DatasetSplit:
    fraction = spec.fraction if fraction is None else fraction
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must lie in (0, 1]")
    full = gen_noisy_classify(spec)
    n = int(round(fraction * spec.n_train))
    if n < 1:
        raise ValidationError(f"fraction {fraction} of {spec.n_train} leaves no training examples")
    return replace(full, train=full.train.take(np.arange(n)), info=dict(full.info, fraction=fraction))


# --- sequences --------------------------------------------------------------


def _swap_distractors(rng, tokens, lengths):
    tokens = tokens.copy()
    for row, n in enumerate(lengths):
        if n >= 3:
            i, j = rng.choice(np.arange(1, n), size=2, replace=False)
            tokens[row, i], tokens[row, j] = tokens[row, j], tokens[row, i]
    return tokens


def _long_range_batch(rng, spec: TaskSpec, n, seq_len, augment=False):
    lengths = (
        rng.choice(np.array(spec.seq_lengths), size=n) if spec.seq_lengths else np.full(n, seq_len)
    )
    width = int(lengths.max())
    keys = rng.integers(0, spec.n_classes, size=n)
    fill = rng.integers(spec.n_classes, spec.vocab, size=(n, width))
    tokens = np.where(np.arange(width)[None, :] < lengths[:, None], fill, PAD)
    tokens[:, 0] = keys
    if augment:
        tokens = _swap_distractors(rng, tokens, lengths)
    return TaskBatch(tokens, keys, "sequence")


def gen_long_range_seq(spec: TaskSpec, seq_len: int | None = None) -> DatasetSplit:
    """The target token is the first token of the sequence.

    Key tokens come from ``[0, n_classes)``, distractors from
    ``[n_classes, vocab)``, so only the first position carries signal.
    """
    seq_len = spec.seq_len if seq_len is None else seq_len
    if seq_len < 2 or any(x < 2 for x in spec.seq_lengths):
        raise ValidationError("sequence length must be >= 2")
    if spec.vocab <= spec.n_classes:
        raise ValidationError("vocab must exceed n_classes to leave room for distractors")
    _, tr, va, te = _streams(spec.seed)
    return DatasetSplit(
        _long_range_batch(tr, spec, spec.n_train, seq_len, spec.augment_swap),
        _long_range_batch(va, spec, spec.n_val, seq_len),
        _long_range_batch(te, spec, spec.n_test, seq_len),
        spec,
        {"seq_len": seq_len},
    )


def transition_matrix(spec: TaskSpec) -> np.ndarray:
    V = spec.vocab
    if V < 2:
        raise ValidationError("markov language needs vocab >= 2")
    if spec.chain == "uniform":
        return np.full((V, V), 1.0 / V)
    if spec.chain == "cycle":
        return np.roll(np.eye(V), 1, axis=1)
    geo = _streams(spec.seed)[0]
    return geo.dirichlet(np.full(V, spec.concentration), size=V)


def stationary_distribution(T) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValidationError("transition matrix must be square")
    if np.any(T < 0) or np.max(np.abs(T.sum(axis=1) - 1.0)) > 1e-10:
        raise ValidationError("transition matrix is not row-stochastic")
    V = T.shape[0]
    system = np.vstack([T.T - np.eye(V), np.ones((1, V))])
    rhs = np.zeros(V + 1)
    rhs[-1] = 1.0
    pi = np.linalg.lstsq(system, rhs, rcond=None)[0]
    return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


def entropy_rate(T) -> float:
    """``-sum_i pi_i sum_j T_ij ln T_ij`` in nats."""
    T = np.asarray(T, dtype=np.float64)
    pi = stationary_distribution(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(T > 0, np.log(np.where(T > 0, T, 1.0)), 0.0)
    return float(-np.sum(pi[:, None] * T * logs))


def _markov_stream(rng, T, pi, length):
    u = rng.random(length)
    cum = np.cumsum(T, axis=1)
    cum[:, -1] = 1.0
    start = np.cumsum(pi)
    start[-1] = 1.0
    out = np.empty(length, dtype=np.int64)
    out[0] = np.searchsorted(start, u[0], side="right")
    for i in range(1, length):
        out[i] = np.searchsorted(cum[out[i - 1]], u[i], side="right")
    return np.minimum(out, T.shape[0] - 1)


def _markov_batch(rng, T, pi, n, context):
    stream = _markov_stream(rng, T, pi, n + context)
    idx = np.arange(n)[:, None] + np.arange(context)[None, :]
    return TaskBatch(stream[idx], stream[context:], "sequence")


def gen_markov_lang(spec: TaskSpec) -> DatasetSplit:
    """Next-token examples cut from a first-order Markov chain.

    Each example's input is the ``context`` tokens preceding its target.
    """
    T = transition_matrix(spec)
    pi = stationary_distribution(T)
    h = entropy_rate(T)
    _, tr, va, te = _streams(spec.seed)
    return DatasetSplit(
        _markov_batch(tr, T, pi, spec.n_train, spec.context),
        _markov_batch(va, T, pi, spec.n_val, spec.context),
        _markov_batch(te, T, pi, spec.n_test, spec.context),
        spec,
        {"transition": T, "stationary": pi, "entropy_rate": h, "optimal_perplexity": math.exp(h)},
    )


def gen_low_resource(spec: TaskSpec) -> DatasetSplit:
    sized = replace(spec, n_train=LOW_RESOURCE_SIZES[spec.size_preset])
    if spec.low_resource_family == "noisy_classify":
        return gen_noisy_classify(sized)
    return gen_markov_lang(sized)


def generate(spec: TaskSpec) -> DatasetSplit:
    """Training split for any family (source domain for ``domain_shift``)."""
    if spec.family in ("noisy_classify",):
        return gen_noisy_classify(spec)
    if spec.family == "domain_shift":
        return gen_domain_shift(spec)[0]
    if spec.family == "size_sweep":
        return gen_size_sweep(spec)
    if spec.family == "long_range_seq":
        return gen_long_range_seq(spec)
    if spec.family == "markov_lang":
        return gen_markov_lang(spec)
    return gen_low_resource(spec)


# --- batching ------------------------------------------------------------


def dynamic_batch_plan(lengths, max_tokens: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Length-bucketed index batches.

    Examples are sorted by length (ties broken randomly) and packed
    greedily so that ``batch_size * longest_in_batch <= max_tokens``; the
    batch order is then shuffled.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size and lengths.max() > max_tokens:
        raise ValidationError(f"a sequence of length {lengths.max()} exceeds max_tokens={max_tokens}")
    order = np.lexsort((rng.random(lengths.size), lengths))
    batches, cur, cur_max = [], [], 0
    for i in order:
        new_max = max(cur_max, lengths[i])
        if cur and (len(cur) + 1) * new_max > max_tokens:
            batches.append(np.array(cur, dtype=np.int64))
            cur, new_max = [], lengths[i]
        cur.append(i)
        cur_max = new_max
    if cur:
        batches.append(np.array(cur, dtype=np.int64))
    return [batches[k] for k in rng.permutation(len(batches))]


def dynamic_batches(data, max_tokens: int, seed: int = 0) -> list[TaskBatch]:
    batch = data.train if isinstance(data, DatasetSplit) else data
    rng = np.random.Generator(np.random.PCG64(seed))
    return [batch.take(idx) for idx in dynamic_batch_plan(batch.lengths, max_tokens, rng)]


# --- text serialization -----------------------------------------------------


def format_example(batch: TaskBatch, i: int) -> str:
    if batch.kind == "sequence":
        x = " ".join(str(int(t)) for t in batch.inputs[i, : batch.lengths[i]])
    else:
        x = ",".join(repr(float(v)) for v in batch.inputs[i])
    if batch.kind == "regression":
        y = ",".join(repr(float(v)) for v in batch.targets[i])
    else:
        y = str(int(batch.targets[i]))
    return f"{x}\t{y}"


def write_batch(batch: TaskBatch, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(batch)):
            fh.write(format_example(batch, i) + "\n")


def read_batch(path, kind: str) -> TaskBatch:
    xs, ys = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            x, y = line.rstrip("\n").split("\t")
            if kind == "sequence":
                xs.append([int(t) for t in x.split()])
                ys.append(int(y))
            else:
                xs.append([float(v) for v in x.split(",")])
                ys.append([float(v) for v in y.split(",")] if kind == "regression" else int(y))
    if kind == "sequence":
        width = max(len(r) for r in xs)
        xs = [r + [PAD] * (width - len(r)) for r in xs]
    return TaskBatch(np.array(xs), np.array(ys), kind)


def write_split(split: DatasetSplit, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        write_batch(getattr(split, name), directory / f"{name}.txt")
