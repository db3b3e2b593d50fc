import numpy as np
import pytest

from ditr.network import Architecture, forward, init_classifier, predict_prob
from ditr.sampling import PatchDataset
from ditr.train import DegenerateLabelsError, TrainConfig, accuracy, input_statistics, train

TOY = Architecture(7, ((4, 3, 2),))


def _separable(n, seed, p=7, margin=0.05):
    """Patch pairs labelled 1 exactly when ``u`` is brighter than ``v`` on average."""
    rng = np.random.default_rng(seed)
    u = rng.random((n, p, p))
    v = rng.random((n, p, p))
    diff = u.mean(axis=(1, 2)) - v.mean(axis=(1, 2))
    # push every pair at least ``margin`` away from the decision boundary
    push = np.where(diff >= 0, 1.0, -1.0) * margin / 2
    u = np.clip(u + push[:, None, None], 0, 1)
    v = np.clip(v - push[:, None, None], 0, 1)
    diff = u.mean(axis=(1, 2)) - v.mean(axis=(1, 2))
    z = (diff > 0).astype(np.float32)
    return PatchDataset(u.astype(np.float32), v.astype(np.float32), z), diff


def _logistic_oracle(feature, z, iters=50):
    """Newton-fitted 1D logistic regression on ``feature``; returns training accuracy."""
    X = np.stack([feature, np.ones_like(feature)], axis=1)
    w = np.zeros(2)
    for _ in range(iters):
        p = 1 / (1 + np.exp(-X @ w))
        g = X.T @ (p - z)
        H = X.T @ (X * (p * (1 - p))[:, None]) + 1e-6 * np.eye(2)
        w -= np.linalg.solve(H, g)
    return float((((X @ w) > 0) == (z > 0.5)).mean())


def test_config_validation():
    for kw in (dict(learning_rate=0), dict(batch_size=0), dict(weight_decay=-1), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_degenerate_labels():
    ds = PatchDataset(np.zeros((4, 7, 7), np.float32), np.zeros((4, 7, 7), np.float32), np.ones(4, np.float32))
    with pytest.raises(DegenerateLabelsError, match="degenerate labels"):
        train(init_classifier(TOY), ds, TrainConfig())


def test_separable_toy_reaches_98_percent():
    ds, diff = _separable(2000, 0)
    assert _logistic_oracle(diff, ds.z) >= 0.98
    cfg = TrainConfig(epochs=10, optimizer="adam", learning_rate=1e-2, weight_decay=0.0, batch_size=64)
    theta, trace = train(init_classifier(TOY, 0), ds, cfg)
    assert accuracy(theta, ds) >= 0.98
    assert trace[-1] < trace[0]


def test_loss_trace_non_increasing_at_small_rate():
    ds, _ = _separable(1000, 1)
    cfg = TrainConfig(epochs=12, optimizer="adam", learning_rate=1e-3, weight_decay=0.0, batch_size=64)
    _, trace = train(init_classifier(TOY, 1), ds, cfg)
    assert np.isfinite(trace).all()
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_sgd_decreases_loss_on_separable_toy():
    ds, _ = _separable(1000, 2)
    cfg = TrainConfig(epochs=10, learning_rate=1e-3, momentum=0.9, weight_decay=0.0, batch_size=32)
    _, trace = train(init_classifier(TOY, 2), ds, cfg)
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_uninformative_labels_learn_the_prior():
    rng = np.random.default_rng(3)
    n = 4000
    u = rng.random((n, 7, 7)).astype(np.float32)
    v = rng.random((n, 7, 7)).astype(np.float32)
    z = (rng.random(n) < 0.3).astype(np.float32)
    cfg = TrainConfig(epochs=8, optimizer="adam", learning_rate=3e-3, weight_decay=0.0, batch_size=128)
    theta, _ = train(init_classifier(TOY, 3), PatchDataset(u, v, z), cfg)
    probs = predict_prob(theta, u[:500], v[:500])
    assert abs(probs.mean() - z.mean()) < 0.05
    assert np.abs(probs - z.mean()).max() < 0.1


def test_training_is_deterministic_and_leaves_input_alone():
    ds, _ = _separable(600, 4)
    theta0 = init_classifier(TOY, 4)
    before = theta0.checksum()
    cfg = TrainConfig(epochs=3, optimizer="adam", learning_rate=1e-3, seed=9)
    a, ta = train(theta0, ds, cfg)
    b, tb = train(theta0, ds, cfg)
    assert a.checksum() == b.checksum() and ta == tb
    assert theta0.checksum() == before
    c, _ = train(theta0, ds, TrainConfig(epochs=3, optimizer="adam", learning_rate=1e-3, seed=10))
    assert c.checksum() != a.checksum()


def test_standardization_is_recorded_in_the_classifier():
    ds, _ = _separable(500, 5)
    shift, scale = input_statistics(ds)
    assert shift[0] == pytest.approx(float(ds.u.astype(np.float64).mean()))
    assert scale[1] == pytest.approx(float(ds.v.astype(np.float64).std()))
    theta, _ = train(init_classifier(TOY), ds, TrainConfig(epochs=1))
    assert theta.arch.input_shift == shift and theta.arch.input_scale == scale
    raw, _ = train(init_classifier(TOY), ds, TrainConfig(epochs=1, standardize=False))
    assert raw.arch.input_shift == (0.0, 0.0)


def test_constant_channel_gets_unit_scale():
    u = np.full((4, 7, 7), 0.5, np.float32)
    ds = PatchDataset(u, np.random.default_rng(0).random((4, 7, 7)).astype(np.float32), np.array([0, 1, 0, 1], np.float32))
    _, scale = input_statistics(ds)
    assert scale[0] == 1.0


def test_accuracy_counts_sign_of_logit():
    ds, _ = _separable(300, 6)
    theta = init_classifier(TOY, 6)
    f = forward(theta, ds.u, ds.v)
    assert accuracy(theta, ds, batch=64) == pytest.approx(((f > 0) == (ds.z > 0.5)).mean(), abs=1e-12)
