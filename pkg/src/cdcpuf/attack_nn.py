"""Multilayer-perceptron attack: four tanh hidden layers and a sigmoid output.

Hidden widths for ``k`` components of ``n`` stages are
``[k*n, k*n//2, k*n//2, k*n]``; the input is the concatenated parity features
of the ``k`` sub-challenges.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergedTrainingError, FormatError, InvalidInputError
from .optim import Adam, bce_from_logits, default_batch_size, sigmoid
from .puf import transform_challenge

_CHUNK = 1 << 14
_MAGIC = b"NNMD"
_HEADER = struct.Struct("<4sBHBB")


def hidden_widths(n, k):
    kn = k * n
    return [kn, kn // 2, kn // 2, kn]


@dataclass(eq=False)
class MlpModel:
    weights: list  # weights[i] has shape (fan_in, fan_out)
    biases: list
    n: int
    k: int

    def __post_init__(self):
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("need one bias vector per weight matrix")
        width = self.k * self.n
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[0] != width or b.shape != (w.shape[1],):
                raise InvalidInputError("layer shapes do not chain")
            width = w.shape[1]
        if width != 1:
            raise InvalidInputError("the output layer must have width 1")

    @property
    def widths(self):
        return [w.shape[1] for w in self.weights[:-1]]

    @property
    def params(self):
        return [*self.weights, *self.biases]

    def copy(self):
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.n, self.k)

    def __eq__(self, other):
        return (
            isinstance(other, MlpModel)
            and (self.n, self.k) == (other.n, other.k)
            and len(self.weights) == len(other.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.params, other.params))
        )


@dataclass
class NnTrainConfig:
    learning_rate: float = 0.001
    batch_size: int | None = None  # None: 10**(k-1), floor 32 for k <= 2
    early_stop_val_accuracy: float = 0.98
    max_epochs: int = 300
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_delta: float = 1e-4
    min_learning_rate: float = 1e-6
    decay_after_val_accuracy: float = 0.6  # no plateau decay while still near chance
    init_std: float = 0.05
    init_seed: int = 0
    shuffle_seed: int = 0
    wall_clock_budget: float | None = None  # seconds

    def __post_init__(self):
        if not 0.5 < self.early_stop_val_accuracy <= 1:
            raise InvalidInputError("early_stop_val_accuracy must lie in (0.5, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.plateau_patience < 1:
            raise InvalidInputError("max_epochs and plateau_patience must be >= 1")


@dataclass
class NnTrainReport:
    epochs: int
    best_epoch: int
    stop_reason: str
    train_loss: float
    val_loss: float
    train_accuracy: float
    val_accuracy: float
    wall_time: float
    seeds: dict = field(default_factory=dict)
    val_accuracy_history: list = field(default_factory=list)


def nn_encode(cc):
    """Concatenated parity features, ``(..., k, n) -> (..., k*n)`` as float64."""
    cc = np.asarray(cc, dtype=np.uint8)
    if cc.ndim < 2:
        raise InvalidInputError("expected challenge tuples of shape (..., k, n)")
    phi = transform_challenge(cc)
    return phi.reshape(phi.shape[:-2] + (-1,))


def _encode_int8(challenges):
    challenges = np.asarray(challenges, dtype=np.uint8)
    out = np.empty((len(challenges), challenges.shape[1] * challenges.shape[2]), dtype=np.int8)
    for start in range(0, len(challenges), _CHUNK):
        out[start:start + _CHUNK] = nn_encode(challenges[start:start + _CHUNK]).astype(np.int8)
    return out


def nn_init(n, k, seed, init_std=0.05, widths=None):
    if n < 1 or k < 1 or k * n < 2:
        raise InvalidInputError(f"need k*n >= 2, got n={n}, k={k}")
    widths = hidden_widths(n, k) if widths is None else list(widths)
    rng = np.random.default_rng(seed)
    sizes = [k * n, *widths, 1]
    weights = [rng.normal(0.0, init_std, size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return MlpModel(weights, biases, n, k)


def _check_input(model, x):
    if x.shape[-1] != model.k * model.n:
        raise InvalidInputError(f"input width {x.shape[-1]} does not match {model.k * model.n}")


def _forward(model, x):
    acts = [x]
    a = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        a = np.tanh(a @ w + b)
        acts.append(a)
    z = (a @ model.weights[-1] + model.biases[-1])[:, 0]
    return z, acts


def _backward(model, acts, z, r):
    """Gradients of mean BCE for every weight then every bias, matching ``model.params``."""
    delta = ((sigmoid(z) - r) / len(r))[:, None]
    gw, gb = [], []
    for i in range(len(model.weights) - 1, -1, -1):
        gw.append(acts[i].T @ delta)
        gb.append(delta.sum(axis=0))
        if i:
            delta = (delta @ model.weights[i].T) * (1.0 - acts[i] ** 2)
    return gw[::-1] + gb[::-1]


def nn_logits(model, x):
    x = np.asarray(x)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    _check_input(model, x)
    z = np.empty(len(x))
    for start in range(0, len(x), _CHUNK):
        z[start:start + _CHUNK] = _forward(model, x[start:start + _CHUNK].astype(np.float64))[0]
    return float(z[0]) if single else z


def nn_forward(model, x):
    """Probability that the response is 1, for one input vector or a batch."""
    return sigmoid(nn_logits(model, x))


def nn_loss(model, x, r):
    return bce_from_logits(nn_logits(model, np.atleast_2d(x)), np.asarray(r, dtype=np.float64))


def nn_backward(model, x, r):
    """Return ``(loss, grads)`` with grads ordered like ``model.params``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if len(r) == 0 or len(r) != len(x):
        raise InvalidInputError("batch inputs and targets must be nonempty and aligned")
    _check_input(model, x)
    z, acts = _forward(model, x)
    return bce_from_logits(z, r), _backward(model, acts, z, r)


def nn_predict(model, challenges):
    z = nn_logits(model, _encode_int8(challenges))
    return (z > 0).astype(np.uint8)


def nn_accuracy(model, crps):
    return float(np.mean(nn_predict(model, crps.challenges) == crps.responses))


def _evaluate(model, x, r):
    z = nn_logits(model, x)
    return bce_from_logits(z, r), float(np.mean((z > 0) == (r > 0.5)))


def nn_train(train, validation, config=None, log=None):
    """Fit an :class:`MlpModel`; returns ``(model, NnTrainReport)``.

    Stops at the first epoch whose validation accuracy reaches
    ``config.early_stop_val_accuracy``, once plateau reductions have pushed the
    learning rate below ``min_learning_rate``, at ``max_epochs`` or when the
    wall-clock budget runs out. The returned model is the epoch with the best validation
    accuracy. Raises :class:`DivergedTrainingError` on a non-finite loss.
    """
    config = config or NnTrainConfig()
    if len(train) == 0 or len(validation) == 0:
        raise InvalidInputError("training and validation sets must be nonempty")
    if (train.n, train.k) != (validation.n, validation.k):
        raise InvalidInputError("training and validation sets disagree on (n, k)")
    t0 = time.perf_counter()
    n, k = train.n, train.k
    batch = min(config.batch_size or default_batch_size(k, len(train)), len(train))
    x, y = _encode_int8(train.challenges), train.responses.astype(np.float64)
    vx, vy = _encode_int8(validation.challenges), validation.responses.astype(np.float64)

    model = nn_init(n, k, config.init_seed, config.init_std)
    opt = Adam(model.params, lr=config.learning_rate)
    shuffler = np.random.default_rng(config.shuffle_seed)

    best, best_acc, best_epoch = model.copy(), -1.0, 0
    plateau_loss, stale, peak_acc = np.inf, 0, 0.0
    history = []
    stop = "max_epochs"
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        last_finite = model.copy()
        perm = shuffler.permutation(len(y))
        for start in range(0, len(perm), batch):
            idx = perm[start:start + batch]
            xb, yb = x[idx].astype(np.float64), y[idx]
            z, acts = _forward(model, xb)
            loss = bce_from_logits(z, yb)
            if not np.isfinite(loss):
                raise DivergedTrainingError(f"non-finite loss in epoch {epoch}", last_finite, epoch)
            opt.step(_backward(model, acts, z, yb))
        val_loss, val_acc = _evaluate(model, vx, vy)
        if not np.isfinite(val_loss):
            raise DivergedTrainingError(
                f"non-finite validation loss in epoch {epoch}", last_finite, epoch
            )
        history.append(val_acc)
        if val_acc > best_acc:
            best, best_acc, best_epoch = model.copy(), val_acc, epoch
        if val_acc > peak_acc:
            peak_acc = val_acc
        if peak_acc < config.decay_after_val_accuracy:
            plateau_loss, stale = val_loss, 0
        elif val_loss < plateau_loss - config.min_delta:
            plateau_loss, stale = val_loss, 0
        else:
            stale += 1
            if stale >= config.plateau_patience:
                opt.lr *= config.plateau_factor
                stale = 0
        if log:
            log(f"epoch {epoch}: val_loss={val_loss:.5f} val_acc={val_acc:.4f} lr={opt.lr:.2e}")
        if val_acc >= config.early_stop_val_accuracy:
            stop = "val_accuracy"
            break
        if opt.lr < config.min_learning_rate:
            stop = "min_learning_rate"
            break
        if config.wall_clock_budget and time.perf_counter() - t0 > config.wall_clock_budget:
            stop = "wall_clock"
            break

    train_loss, train_acc = _evaluate(best, x, y)
    val_loss, val_acc = _evaluate(best, vx, vy)
    report = NnTrainReport(
        epochs=epoch,
        best_epoch=best_epoch,
        stop_reason=stop,
        train_loss=train_loss,
        val_loss=val_loss,
        train_accuracy=train_acc,
        val_accuracy=val_acc,
        wall_time=time.perf_counter() - t0,
        seeds={"init": config.init_seed, "shuffle": config.shuffle_seed},
        val_accuracy_history=history,
    )
    return best, report


def nn_model_to_bytes(model):
    widths = [w.shape[1] for w in model.weights]
    out = [_HEADER.pack(_MAGIC, 1, model.n, model.k, len(widths)),
           struct.pack(f"<{len(widths)}I", *widths)]
    for w, b in zip(model.weights, model.biases):
        out.append(w.astype("<f8").tobytes())
        out.append(b.astype("<f8").tobytes())
    return b"".join(out)


def nn_model_from_bytes(data):
    if len(data) < _HEADER.size:
        raise FormatError("truncated NN checkpoint header", len(data))
    magic, version, n, k, layers = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != 1:
        raise FormatError(f"unsupported version {version}", 4)
    offset = _HEADER.size
    if len(data) < offset + 4 * layers:
        raise FormatError("truncated layer widths", len(data))
    widths = struct.unpack_from(f"<{layers}I", data, offset)
    offset += 4 * layers
    fan_in = k * n
    weights, biases = [], []
    for width in widths:
        for shape in ((fan_in, width), (width,)):
            size = 8 * int(np.prod(shape))
            if len(data) < offset + size:
                raise FormatError("truncated tensor data", len(data))
            arr = np.frombuffer(data, "<f8", count=size // 8, offset=offset).reshape(shape)
            (weights if len(shape) == 2 else biases).append(arr.astype(np.float64))
            offset += size
        fan_in = width
    if offset != len(data):
        raise FormatError("trailing bytes after last tensor", offset)
    return MlpModel(weights, biases, n, k)


def save_nn_model(model, path):
    Path(path).write_bytes(nn_model_to_bytes(model))


def load_nn_model(path):
    return nn_model_from_bytes(Path(path).read_bytes())
