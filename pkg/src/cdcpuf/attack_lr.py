"""Logistic-regression attack on (CDC-)XOR PUFs.

One linear delay model per component, each fed its own sub-challenge.
The component scores ``s_l = w_l . [phi(c_l); 1]`` are multiplied into a
single logit ``z = prod_l s_l`` and ``sigmoid(z)`` models P(response = 1).
Fitting is mini-batch Adam on binary cross-entropy. The learning rate is
halved whenever validation loss stalls, training stops when it has stalled
for ``patience`` epochs, and attempts that never leave the chance-level
plateau are restarted from a fresh random initialization.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergedTrainingError, FormatError, InvalidInputError
from .optim import Adam, bce_from_logits, default_batch_size, sigmoid
from .puf import features_with_bias

_CHUNK = 1 << 15
_MAGIC = b"LRMD"
_HEADER = struct.Struct("<4sBHB")


@dataclass(eq=False)
class LrModel:
    weights: np.ndarray  # (k, n + 1), bias last

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] < 2:
            raise InvalidInputError("LR weights must have shape (k, n + 1)")

    @property
    def k(self):
        return self.weights.shape[0]

    @property
    def n(self):
        return self.weights.shape[1] - 1

    def copy(self):
        return LrModel(self.weights.copy())

    def __eq__(self, other):
        return isinstance(other, LrModel) and np.array_equal(self.weights, other.weights)


@dataclass
class LrTrainConfig:
    base_learning_rate: float = 0.01
    batch_size: int | None = None  # None: 10**(k-1), floor 32 for k <= 2
    max_epochs: int = 500
    patience: int = 5
    init_seed: int = 0
    shuffle_seed: int = 0
    wall_clock_budget: float | None = None  # seconds
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    min_delta: float = 1e-4
    max_attempts: int = 200
    decay_after_val_accuracy: float = 0.6
    accept_val_accuracy: float = 0.9

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.patience < 1:
            raise InvalidInputError("patience must be >= 1")
        if self.max_epochs < 1:
            raise InvalidInputError("max_epochs must be >= 1")
        if self.max_attempts < 1 or self.plateau_patience < 1:
            raise InvalidInputError("max_attempts and plateau_patience must be >= 1")
        if not 0 < self.plateau_factor <= 1:
            raise InvalidInputError("plateau_factor must lie in (0, 1]")


@dataclass
class TrainReport:
    epochs: int
    best_epoch: int
    stop_reason: str
    train_loss: float
    val_loss: float
    train_accuracy: float
    val_accuracy: float
    wall_time: float
    seeds: dict = field(default_factory=dict)
    val_loss_history: list = field(default_factory=list)
    best_val_loss_history: list = field(default_factory=list)
    attempts: int = 1
    total_epochs: int = 0


def lr_init(n, k, init_seed):
    if n < 1 or k < 1:
        raise InvalidInputError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(init_seed)
    return LrModel(rng.normal(0.0, 1.0 / np.sqrt(n + 1), size=(k, n + 1)))


def lr_model_from_puf(puf):
    """The LR model that reproduces ``puf`` exactly on noiseless data.

    The product logit is positive when an even number of components answer 0,
    which equals XOR = 1 only for odd ``k``; for even ``k`` the first
    component is negated to line the two up.
    """
    w = puf.weights.copy()
    if puf.k % 2 == 0:
        w[0] = -w[0]
    return LrModel(w)


def lr_features(challenges):
    """``[phi; 1]`` per component as int8, shape ``(N, k, n + 1)``."""
    challenges = np.asarray(challenges, dtype=np.uint8)
    out = np.empty(challenges.shape[:-1] + (challenges.shape[-1] + 1,), dtype=np.int8)
    for start in range(0, len(challenges), _CHUNK):
        out[start:start + _CHUNK] = features_with_bias(challenges[start:start + _CHUNK], np.int8)
    return out


def _check_dims(model, challenges):
    if challenges.shape[-2:] != (model.k, model.n):
        raise InvalidInputError(
            f"challenge tuples of shape {challenges.shape[-2:]} do not match model "
            f"({model.k}, {model.n})"
        )


def _scores(weights, feats):
    return np.einsum("bkd,kd->bk", feats.astype(np.float64), weights)


def _exclusive_products(s):
    """``out[:, l] = prod_{m != l} s[:, m]`` without dividing by ``s``."""
    b, k = s.shape
    left = np.ones((b, k))
    right = np.ones((b, k))
    if k > 1:
        left[:, 1:] = np.cumprod(s[:, :-1], axis=1)
        right[:, :-1] = np.cumprod(s[:, :0:-1], axis=1)[:, ::-1]
    return left * right


def lr_forward(model, cc):
    """Return ``(p, scores)`` for one challenge tuple ``(k, n)`` or a batch."""
    cc = np.asarray(cc, dtype=np.uint8)
    _check_dims(model, cc)
    single = cc.ndim == 2
    feats = features_with_bias(cc.reshape((-1,) + cc.shape[-2:]))
    s = np.einsum("bkd,kd->bk", feats, model.weights)
    p = sigmoid(np.prod(s, axis=1))
    if single:
        return float(p[0]), s[0]
    return p, s


def _loss_and_grad(weights, feats, r):
    s = _scores(weights, feats)
    z = np.prod(s, axis=1)
    loss = bce_from_logits(z, r)
    dz = (sigmoid(z) - r) / len(r)
    coeff = dz[:, None] * _exclusive_products(s)
    grad = np.einsum("bk,bkd->kd", coeff, feats.astype(np.float64))
    return loss, grad


def lr_loss(model, challenges, responses):
    feats = lr_features(challenges)
    s = _scores(model.weights, feats)
    return bce_from_logits(np.prod(s, axis=1), np.asarray(responses, dtype=np.float64))


def lr_gradient(model, challenges, responses):
    """Mean BCE gradient over the batch, same shape as ``model.weights``."""
    challenges = np.asarray(challenges, dtype=np.uint8)
    responses = np.asarray(responses, dtype=np.float64).reshape(-1)
    if len(responses) == 0:
        raise InvalidInputError("gradient of an empty batch")
    _check_dims(model, challenges)
    return _loss_and_grad(model.weights, lr_features(challenges), responses)[1]


def _logits(weights, feats):
    z = np.empty(len(feats))
    for start in range(0, len(feats), _CHUNK):
        z[start:start + _CHUNK] = np.prod(_scores(weights, feats[start:start + _CHUNK]), axis=1)
    return z


def _evaluate(weights, feats, r):
    z = _logits(weights, feats)
    return bce_from_logits(z, r), float(np.mean((z > 0) == (r > 0.5)))


def lr_predict(model, challenges):
    """Predicted bits; 1 iff p > 0.5."""
    challenges = np.asarray(challenges, dtype=np.uint8)
    _check_dims(model, challenges)
    return (_logits(model.weights, lr_features(challenges)) > 0).astype(np.uint8)


def lr_accuracy(model, crps):
    return float(np.mean(lr_predict(model, crps.challenges) == crps.responses))


def _attempt_seed(seed, attempt):
    if attempt == 0:
        return seed
    return int(np.random.SeedSequence([seed, attempt]).generate_state(1, np.uint64)[0])


def _fit_once(xf, yr, vf, vr, n, k, batch, config, init_seed, shuffle_seed, deadline, log):
    w = lr_init(n, k, init_seed).weights
    opt = Adam([w], lr=config.base_learning_rate)
    shuffler = np.random.default_rng(shuffle_seed)

    best_w, best_loss, best_epoch = w.copy(), np.inf, 0
    history, best_history = [], []
    stale = 0
    left_plateau = False
    stop = "max_epochs"
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = shuffler.permutation(len(yr))
        for start in range(0, len(perm), batch):
            idx = perm[start:start + batch]
            before = w.copy()
            loss, grad = _loss_and_grad(w, xf[idx], yr[idx])
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise DivergedTrainingError(
                    f"non-finite loss in epoch {epoch}", LrModel(before), epoch
                )
            opt.step([grad])
        val_loss, val_acc = _evaluate(w, vf, vr)
        if not np.isfinite(val_loss) or not np.all(np.isfinite(w)):
            raise DivergedTrainingError(
                f"non-finite validation loss in epoch {epoch}", LrModel(best_w), epoch
            )
        history.append(val_loss)
        if val_loss < best_loss - config.min_delta:
            stale = 0
        else:
            stale += 1
        if val_loss < best_loss:
            best_w, best_loss, best_epoch = w.copy(), val_loss, epoch
        best_history.append(best_loss)
        # no decay while still at chance level: it only slows the escape
        left_plateau = left_plateau or val_acc >= config.decay_after_val_accuracy
        if left_plateau and stale and stale % config.plateau_patience == 0:
            opt.lr *= config.plateau_factor
        if log:
            log(f"epoch {epoch}: val_loss={val_loss:.5f} lr={opt.lr:.2e}")
        if stale >= config.patience:
            stop = "patience"
            break
        if deadline is not None and time.perf_counter() > deadline:
            stop = "wall_clock"
            break
    return best_w, epoch, best_epoch, stop, history, best_history


def lr_train(train, validation, config=None, log=None):
    """Fit an :class:`LrModel` and return it with a :class:`TrainReport`.

    Each attempt keeps the weights with the lowest validation loss. An
    attempt whose validation accuracy stays below
    ``config.accept_val_accuracy`` is discarded and training restarts from a
    fresh initialization, up to ``config.max_attempts`` times; the attempt
    with the best validation accuracy is returned. Test data is never seen.
    Raises :class:`DivergedTrainingError` on a non-finite loss.
    """
    config = config or LrTrainConfig()
    if len(train) == 0 or len(validation) == 0:
        raise InvalidInputError("training and validation sets must be nonempty")
    if (train.n, train.k) != (validation.n, validation.k):
        raise InvalidInputError("training and validation sets disagree on (n, k)")
    t0 = time.perf_counter()
    deadline = t0 + config.wall_clock_budget if config.wall_clock_budget else None
    n, k = train.n, train.k
    batch = min(config.batch_size or default_batch_size(k, len(train)), len(train))

    xf, yr = lr_features(train.challenges), train.responses.astype(np.float64)
    vf, vr = lr_features(validation.challenges), validation.responses.astype(np.float64)

    best = None
    total_epochs = 0
    attempt = 0
    for attempt in range(1, config.max_attempts + 1):
        init_seed = _attempt_seed(config.init_seed, attempt - 1)
        shuffle_seed = _attempt_seed(config.shuffle_seed, attempt - 1)
        w, epochs, best_epoch, stop, hist, best_hist = _fit_once(
            xf, yr, vf, vr, n, k, batch, config, init_seed, shuffle_seed, deadline, log
        )
        total_epochs += epochs
        val_loss, val_acc = _evaluate(w, vf, vr)
        if log:
            log(f"attempt {attempt}: val_accuracy={val_acc:.4f} after {epochs} epochs")
        if best is None or val_acc > best[1]:
            best = (w, val_acc, val_loss, epochs, best_epoch, stop, hist, best_hist,
                    init_seed, shuffle_seed)
        if val_acc >= config.accept_val_accuracy:
            break
        if deadline is not None and time.perf_counter() > deadline:
            break

    w, val_acc, val_loss, epochs, best_epoch, stop, hist, best_hist, init_seed, shuffle_seed = best
    train_loss, train_acc = _evaluate(w, xf, yr)
    report = TrainReport(
        epochs=epochs,
        best_epoch=best_epoch,
        stop_reason=stop,
        train_loss=train_loss,
        val_loss=val_loss,
        train_accuracy=train_acc,
        val_accuracy=val_acc,
        wall_time=time.perf_counter() - t0,
        seeds={"init": init_seed, "shuffle": shuffle_seed},
        val_loss_history=hist,
        best_val_loss_history=best_hist,
        attempts=attempt,
        total_epochs=total_epochs,
    )
    return LrModel(w), report


def lr_model_to_bytes(model):
    return _HEADER.pack(_MAGIC, 1, model.n, model.k) + model.weights.astype("<f8").tobytes()


def lr_model_from_bytes(data):
    if len(data) < _HEADER.size:
        raise FormatError("truncated LR checkpoint header", len(data))
    magic, version, n, k = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != 1:
        raise FormatError(f"unsupported version {version}", 4)
    expected = _HEADER.size + 8 * k * (n + 1)
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(data)}", min(len(data), expected))
    return LrModel(np.frombuffer(data, "<f8", offset=_HEADER.size).reshape(k, n + 1))


def save_lr_model(model, path):
    Path(path).write_bytes(lr_model_to_bytes(model))


def load_lr_model(path):
    return lr_model_from_bytes(Path(path).read_bytes())
