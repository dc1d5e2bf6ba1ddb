import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdcpuf.attack_lr import (
    LrModel,
    LrTrainConfig,
    _exclusive_products,
    load_lr_model,
    lr_accuracy,
    lr_features,
    lr_forward,
    lr_gradient,
    lr_init,
    lr_loss,
    lr_model_from_bytes,
    lr_model_from_puf,
    lr_model_to_bytes,
    lr_predict,
    lr_train,
    save_lr_model,
)
from cdcpuf.crp import CrpSet, Provenance, generate_crpset, split_crpset
from cdcpuf.errors import DivergedTrainingError, FormatError, InvalidInputError
from cdcpuf.optim import default_batch_size
from cdcpuf.puf import eval_cdc, sample_cdc_xpuf


def enumerate_tuples(n, k):
    bits = np.array(list(itertools.product([0, 1], repeat=n * k)), dtype=np.uint8)
    return bits.reshape(-1, k, n)


def full_enumeration(n, k, seed):
    puf = sample_cdc_xpuf(n, k, seed)
    ch = enumerate_tuples(n, k)
    return puf, CrpSet(n, k, ch, eval_cdc(puf, ch))


def random_batch(n, k, size, seed):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, 2, size=(size, k, n), dtype=np.uint8),
            rng.integers(0, 2, size=size).astype(np.float64))


def fd_gradient(model, ch, r, h=1e-5):
    g = np.zeros_like(model.weights)
    for idx in np.ndindex(*model.weights.shape):
        plus, minus = model.copy(), model.copy()
        plus.weights[idx] += h
        minus.weights[idx] -= h
        g[idx] = (lr_loss(plus, ch, r) - lr_loss(minus, ch, r)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32))
def test_gradient_matches_finite_differences(n, k, seed):
    model = lr_init(n, k, seed)
    ch, r = random_batch(n, k, 16, seed)
    assert rel_err(lr_gradient(model, ch, r), fd_gradient(model, ch, r)) < 1e-4


def test_k1_gradient_is_plain_logistic_regression():
    model = lr_init(6, 1, 3)
    ch, r = random_batch(6, 1, 40, 3)
    x = lr_features(ch)[:, 0].astype(float)
    p = 1 / (1 + np.exp(-(x @ model.weights[0])))
    np.testing.assert_allclose(lr_gradient(model, ch, r)[0], ((p - r)[:, None] * x).mean(0), atol=1e-12)


def test_gradient_vanishes_when_prediction_equals_target():
    model = LrModel(np.zeros((2, 5)))  # p = 0.5 everywhere
    ch, _ = random_batch(4, 2, 10, 0)
    np.testing.assert_array_equal(lr_gradient(model, ch, np.full(10, 0.5)), 0)


def test_gradient_empty_batch():
    with pytest.raises(InvalidInputError):
        lr_gradient(lr_init(4, 2, 0), np.zeros((0, 2, 4), np.uint8), [])


def test_exclusive_products():
    s = np.array([[2.0, -1.0, 3.0], [0.0, 5.0, 7.0]])
    np.testing.assert_array_equal(_exclusive_products(s), [[-3, 6, -2], [35, 0, 0]])


def test_forward_arithmetic():
    # weights chosen so the two scores are 2 and -1 on the all-zero challenge
    model = LrModel([[1.0, 1.0, 0.0], [-0.5, -0.5, 0.0]])
    p, s = lr_forward(model, np.zeros((2, 2), np.uint8))
    np.testing.assert_allclose(s, [2, -1])
    assert p == pytest.approx(1 / (1 + np.exp(2)), abs=1e-12)
    assert p == pytest.approx(0.1192, abs=1e-4)


def test_zero_score_gives_half():
    model = LrModel([[1.0, -1.0, 0.0], [3.0, 1.0, 2.0]])
    p, s = lr_forward(model, np.zeros((2, 2), np.uint8))
    assert s[0] == 0 and p == 0.5
    assert lr_predict(model, np.zeros((1, 2, 2), np.uint8))[0] == 0


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_true_weights_realize_puf_exhaustively(k):
    n = 4 if k <= 2 else 3
    puf, crps = full_enumeration(n, k, 10 + k)
    model = lr_model_from_puf(puf)
    np.testing.assert_array_equal(lr_predict(model, crps.challenges), crps.responses)
    assert lr_accuracy(model, crps) == 1.0


def test_sign_convention_for_raw_weights():
    # with the raw weights z > 0 iff an even number of components answer 0
    puf, crps = full_enumeration(4, 2, 1)
    raw = LrModel(np.array(puf.weights))
    z_pos = lr_predict(raw, crps.challenges)
    np.testing.assert_array_equal(z_pos, 1 - crps.responses)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(1, 4), st.integers(0, 2**32),
       st.lists(st.floats(0.01, 100), min_size=4, max_size=4))
def test_positive_rescaling_keeps_predictions(n, k, seed, scales):
    model = lr_init(n, k, seed)
    ch, _ = random_batch(n, k, 64, seed)
    scaled = LrModel(model.weights * np.array(scales[:k])[:, None])
    np.testing.assert_array_equal(lr_predict(model, ch), lr_predict(scaled, ch))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(2, 5), st.integers(0, 2**32), st.data())
def test_parity_symmetry(n, k, seed, data):
    model = lr_init(n, k, seed)
    ch, _ = random_batch(n, k, 64, seed)
    _, s = lr_forward(model, ch)
    ch = ch[(s != 0).all(axis=1)]
    flip = data.draw(st.lists(st.booleans(), min_size=k, max_size=k))
    w = model.weights.copy()
    w[np.array(flip)] *= -1
    before, after = lr_predict(model, ch), lr_predict(LrModel(w), ch)
    if sum(flip) % 2:
        assert (before != after).all()
    else:
        np.testing.assert_array_equal(before, after)


def test_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        lr_predict(lr_init(4, 2, 0), np.zeros((3, 3, 4), np.uint8))
    with pytest.raises(InvalidInputError):
        lr_forward(lr_init(4, 2, 0), np.zeros((2, 5), np.uint8))


def test_init_scale():
    w = lr_init(64, 6, 0).weights
    assert w.shape == (6, 65)
    assert abs(w.std() - 1 / np.sqrt(65)) < 0.02
    assert lr_init(8, 2, 5) == lr_init(8, 2, 5)


@pytest.mark.parametrize("k,size,expect", [(1, 1000, 32), (2, 1000, 32), (3, 1000, 100),
                                           (4, 80000, 1000), (5, 500, 500), (2, 10, 10)])
def test_default_batch_size(k, size, expect):
    assert default_batch_size(k, size) == expect


def test_untrained_model_is_at_chance():
    puf = sample_cdc_xpuf(32, 3, 0)
    crps = generate_crpset(puf, 4000, seed=1)
    accs = [lr_accuracy(lr_init(32, 3, s), crps) for s in range(10)]
    assert abs(np.mean(accs) - 0.5) < 0.05


def test_realizable_tiny_instances():
    hits = 0
    for seed in range(10):
        _, crps = full_enumeration(4, 2, 100 + seed)
        _, rep = lr_train(crps, crps, LrTrainConfig(init_seed=seed, shuffle_seed=seed))
        hits += rep.train_accuracy >= 0.99
    assert hits >= 8


def test_train_report_consistency_and_monotone_best():
    _, crps = full_enumeration(4, 2, 7)
    model, rep = lr_train(crps, crps, LrTrainConfig(init_seed=1, shuffle_seed=2))
    assert lr_accuracy(model, crps) == rep.train_accuracy
    best = rep.best_val_loss_history
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert rep.val_loss == pytest.approx(min(rep.val_loss_history))


def test_training_deterministic():
    puf = sample_cdc_xpuf(16, 2, 0)
    tr, va, _ = split_crpset(generate_crpset(puf, 2000, seed=0), shuffle_seed=0)
    cfg = LrTrainConfig(init_seed=3, shuffle_seed=4)
    a, ra = lr_train(tr, va, cfg)
    b, rb = lr_train(tr, va, cfg)
    assert a == b and ra.epochs == rb.epochs and ra.attempts == rb.attempts


def test_cdc2_learned_from_samples():
    puf = sample_cdc_xpuf(32, 2, 4)
    tr, va, te = split_crpset(generate_crpset(puf, 5000, seed=2), shuffle_seed=1)
    model, rep = lr_train(tr, va, LrTrainConfig(init_seed=0, shuffle_seed=0))
    assert lr_accuracy(model, te) > 0.95
    assert rep.stop_reason in ("patience", "max_epochs")


def test_max_epochs_and_single_attempt():
    _, crps = full_enumeration(4, 2, 3)
    _, rep = lr_train(crps, crps, LrTrainConfig(max_epochs=3, max_attempts=1, accept_val_accuracy=1.0))
    assert rep.epochs <= 3 and rep.attempts == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    _, crps = full_enumeration(4, 2, 3)
    with pytest.raises(DivergedTrainingError) as e:
        lr_train(crps, crps, LrTrainConfig(base_learning_rate=float("inf"), max_attempts=1))
    assert e.value.model is not None


def test_empty_or_mismatched_splits():
    _, crps = full_enumeration(4, 2, 3)
    with pytest.raises(InvalidInputError):
        lr_train(crps, crps.subset([]))
    other = CrpSet(4, 1, np.zeros((2, 1, 4), np.uint8), [0, 1])
    with pytest.raises(InvalidInputError):
        lr_train(crps, other)


def test_checkpoint_round_trip(tmp_path):
    model = lr_init(64, 4, 9)
    save_lr_model(model, tmp_path / "m.lr")
    assert load_lr_model(tmp_path / "m.lr") == model
    data = lr_model_to_bytes(model)
    assert len(data) == 8 + 4 * 65 * 8
    with pytest.raises(FormatError):
        lr_model_from_bytes(data[:-3])
    with pytest.raises(FormatError):
        lr_model_from_bytes(b"ABCD" + data[4:])
