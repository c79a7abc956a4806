import json
import math

import numpy as np
import pytest

from gridfault._util import DataError
from gridfault.dataio import Dataset
from gridfault.mlp import (BN_EPS, AdamState, MlpConfig, MlpModel, PlateauSchedule, adam_step, backward,
                           dropout_masks, forward, input_gradient, loss, model_loss, train)
import gridfault.mlp as mlp_mod

from helpers import blobs, padded, random_mlp


def _fd_param_check(model, X, y, w, masks, h=1e-4):
    """Worst tensor-wise relative error max|a - n| / max|n| over parameters."""
    def objective():
        _, p = forward(model, X, masks=masks, update_stats=False)
        return model_loss(model, p, y, w)

    objective()
    grads = backward(model, y, w)
    worst = 0.0
    for k, P in model.params.items():
        num = np.zeros_like(P)
        for i in np.ndindex(P.shape):
            old = P[i]
            P[i] = old + h
            up = objective()
            P[i] = old - h
            down = objective()
            P[i] = old
            num[i] = (up - down) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(grads[k]).max(), 1e-8)
        worst = max(worst, np.abs(num - grads[k]).max() / scale)
    return worst


def _fd_input_check(model, x, target=1, of="probability", h=1e-4):
    g = input_gradient(model, x, target, of)
    num = np.array([(model.output(x + h * e, target, of)[0] - model.output(x - h * e, target, of)[0]) / (2 * h)
                    for e in np.eye(len(x))])
    return np.abs(g - num).max() / max(np.abs(num).max(), np.abs(g).max(), 1e-8)


# ------------------------------------------------------------------ config / forward

def test_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(units=(0,))
    with pytest.raises(ValueError):
        MlpConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        MlpConfig(activation="sigmoid")
    assert MlpConfig(units=(8, 4)).L == 2
    assert MlpConfig().batch_size == 32


def test_probabilities_sum_to_one(rng):
    for act in ("relu", "tanh", "elu"):
        m = random_mlp(MlpConfig(units=(7, 5), activation=act, dropout_p=0.3, seed=1), rng, scale=2.0)
        X = rng.normal(size=(9, 12)) * 3
        _, p = forward(m, X)
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-9
        m.train_mode()
        _, p = forward(m, X, rng=rng)
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-9


def test_zero_output_weights_give_half():
    m = MlpModel(MlpConfig(units=()))
    m.params["W_out"][:] = 0
    m.params["b_out"][:] = 0
    _, p = forward(m, np.ones((3, 12)))
    assert np.all(p == 0.5)


def test_hand_forward_identity_block():
    m = MlpModel(MlpConfig(units=(12,), activation="relu"))
    m.params.update(W0=np.eye(12), b0=np.zeros(12), gamma0=np.ones(12), beta0=np.zeros(12))
    m.buffers.update(mean0=np.zeros(12), var0=np.ones(12))
    # route hidden unit 0 to logit 1 and hidden unit 1 to logit 0
    W = np.zeros((12, 2))
    W[0, 1] = 1.0
    W[1, 0] = 1.0
    m.params.update(W_out=W, b_out=np.zeros(2))
    logits, _ = forward(m, padded([[1.0, -1.0]]))
    assert logits[0, 1] == pytest.approx(1 / math.sqrt(1 + BN_EPS), abs=1e-15)
    assert logits[0, 1] == pytest.approx(1.0, abs=1e-5)
    assert logits[0, 0] == 0.0


def test_train_forward_needs_two_samples(rng):
    m = random_mlp(MlpConfig(units=(4,)), rng).train_mode()
    with pytest.raises(DataError):
        forward(m, np.zeros((1, 12)), rng=rng)


def test_train_mode_batch_norm_statistics(rng):
    m = random_mlp(MlpConfig(units=(6, 5), activation="elu", seed=2), rng).train_mode()
    forward(m, rng.normal(size=(16, 12)) * 4 + 1, rng=rng, update_stats=False)
    for _, xhat, *_ in m._cache[0]:
        assert np.abs(xhat.mean(axis=0)).max() < 1e-6
        assert np.abs(xhat.var(axis=0) - 1).max() < 1e-4


def test_running_stats_update_with_momentum(rng):
    m = random_mlp(MlpConfig(units=(3,), seed=0), rng).train_mode()
    before = m.buffers["mean0"].copy()
    X = rng.normal(size=(8, 12))
    forward(m, X, rng=rng)
    z = X @ m.params["W0"] + m.params["b0"]
    assert np.allclose(m.buffers["mean0"], 0.9 * before + 0.1 * z.mean(axis=0))


def test_inference_forward_is_pure_and_batch_independent(rng):
    m = random_mlp(MlpConfig(units=(8, 8), dropout_p=0.4, seed=5), rng)
    X = rng.normal(size=(10, 12))
    a = m.predict_proba(X)
    b = m.predict_proba(X)
    c = np.array([m.predict_proba(x[None])[0] for x in X])
    assert np.array_equal(a, b)
    assert np.allclose(a, c, rtol=0, atol=1e-15)


# ------------------------------------------------------------------ loss / backward

def test_loss_examples():
    assert loss(np.array([[0.5, 0.5]]), [1]) == pytest.approx(math.log(2), abs=1e-15)
    assert loss(np.array([[0.0, 1.0]]), [1]) == 0.0
    W = np.full((2, 2), 1.0)  # squared Frobenius norm 4
    assert loss(np.array([[0.0, 1.0]]), [1], l2_lambda=0.1, kernels=[W]) == pytest.approx(0.4)
    # clamp keeps a hopeless prediction finite
    assert math.isfinite(loss(np.array([[1.0, 0.0]]), [1]))


@pytest.mark.parametrize("act", ["relu", "tanh", "elu"])
def test_backward_matches_finite_differences(act, rng):
    m = random_mlp(MlpConfig(units=(7, 5), activation=act, dropout_p=0.3, l2_lambda=0.01, seed=3), rng,
                   scale=0.3).train_mode()
    X = rng.normal(size=(8, 12))
    y = rng.integers(0, 2, 8)
    w = rng.uniform(0.5, 2, 8)
    assert _fd_param_check(m, X, y, w, dropout_masks(m, 8, rng)) < 1e-3


def test_saturated_correct_batch_has_no_gradient():
    m = MlpModel(MlpConfig(units=())).train_mode()
    W = np.zeros((12, 2))
    W[0] = (-100.0, 100.0)
    m.params.update(W_out=W, b_out=np.zeros(2))
    X = padded([[1.0], [-1.0], [2.0], [-3.0]])
    y = np.array([1, 0, 1, 0])
    forward(m, X)
    g = backward(m, y)
    assert max(np.abs(v).max() for v in g.values()) < 1e-6


def test_dropped_unit_gets_zero_dense_gradient(rng):
    m = random_mlp(MlpConfig(units=(6,), dropout_p=0.5, seed=1), rng).train_mode()
    masks = [np.full((8, 6), 2.0)]
    masks[0][:, 2] = 0.0
    forward(m, rng.normal(size=(8, 12)), masks=masks)
    g = backward(m, rng.integers(0, 2, 8))
    assert np.all(g["W0"][:, 2] == 0) and g["b0"][2] == 0
    assert np.any(g["W0"][:, 1] != 0)


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        backward(MlpModel(MlpConfig(units=(3,))), [0, 1])


# ------------------------------------------------------------------ input gradients

@pytest.mark.parametrize("act", ["relu", "tanh", "elu"])
@pytest.mark.parametrize("of", ["probability", "logit"])
def test_input_gradient_matches_finite_differences(act, of, rng):
    m = random_mlp(MlpConfig(units=(9, 4), activation=act, seed=0), rng, scale=0.4)
    for _ in range(3):
        assert _fd_input_check(m, rng.normal(size=12), of=of) < 1e-3


def test_linear_model_logit_gradient_is_weight_row(rng):
    m = MlpModel(MlpConfig(units=()))
    m.params["W_out"] = rng.normal(size=(12, 2))
    for t in (0, 1):
        g = input_gradient(m, rng.normal(size=12), t, "logit")
        assert np.array_equal(g, m.params["W_out"][:, t])


def test_disconnected_input_has_exact_zero_gradient(rng):
    m = random_mlp(MlpConfig(units=(8, 4), activation="relu", seed=4), rng)
    m.params["W0"][5] = 0.0
    g = input_gradient(m, rng.normal(size=(6, 12)))
    assert np.all(g[:, 5] == 0.0)


def test_class_probability_gradients_cancel(rng):
    m = random_mlp(MlpConfig(units=(5,), activation="tanh"), rng)
    x = rng.normal(size=(4, 12))
    assert np.abs(input_gradient(m, x, 0) + input_gradient(m, x, 1)).max() < 1e-9


def test_input_gradient_requires_inference_mode(rng):
    m = random_mlp(MlpConfig(units=(5,)), rng).train_mode()
    with pytest.raises(RuntimeError):
        input_gradient(m, np.zeros(12))


# ------------------------------------------------------------------ Adam

def test_adam_first_step():
    p = {"a": np.zeros(3)}
    new, state = adam_step(p, {"a": np.ones(3)}, AdamState(), lr=0.001)
    assert new["a"] == pytest.approx(np.full(3, -0.001 / (1 + 1e-8)), abs=1e-15)
    assert state.t == 1 and np.all(p["a"] == 0)


def test_adam_zero_gradient_keeps_params():
    p = {"a": np.array([1.5, -2.0])}
    new, _ = adam_step(p, {"a": np.zeros(2)}, AdamState(), lr=0.1)
    assert np.array_equal(new["a"], p["a"])


def test_adam_is_deterministic(rng):
    p = {"a": rng.normal(size=4)}
    g = {"a": rng.normal(size=4)}
    s = AdamState({"a": rng.normal(size=4)}, {"a": rng.uniform(size=4)}, 3)
    a = adam_step(p, g, s, 0.01)
    b = adam_step(p, g, s, 0.01)
    assert np.array_equal(a[0]["a"], b[0]["a"]) and a[1].t == b[1].t == 4


# ------------------------------------------------------------------ schedule / training

def test_schedule_halves_once_after_ten_flat_epochs():
    s = PlateauSchedule(0.01)
    s.update(0, 1.0)
    lrs = []
    for e in range(1, 11):
        s.update(e, 1.0)
        lrs.append(s.lr)
    assert lrs[:9] == [0.01] * 9 and lrs[9] == 0.005
    assert not s.should_stop


def test_strictly_improving_validation_runs_to_max_epochs(monkeypatch):
    calls = iter(range(1000))
    monkeypatch.setattr(mlp_mod, "evaluate_loss", lambda model, ds: 1.0 / (2 + next(calls)))
    ds = blobs(20, seed=1)
    _, log = train(MlpConfig(units=(4,), seed=0), ds, ds, max_epochs=12)
    assert log.stop_reason == "max_epochs" and log.stop_epoch == 11 and log.best_epoch == 11
    assert log.lr == [1e-3] * 12


def test_flat_validation_stops_early_and_halves_lr(monkeypatch):
    monkeypatch.setattr(mlp_mod, "evaluate_loss", lambda model, ds: 0.5)
    ds = blobs(20, seed=1)
    _, log = train(MlpConfig(units=(4,), lr=0.008, seed=0), ds, ds, max_epochs=100)
    assert log.stop_reason == "early_stop"
    assert log.best_epoch == 0 and log.stop_epoch == 30
    assert log.lr[10] == 0.008 and log.lr[11] == 0.004 and log.lr[21] == 0.002
    assert all(a >= b for a, b in zip(log.lr, log.lr[1:]))


def test_training_reaches_separable_accuracy():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 12))
    y = (X[:, 0] + X[:, 3] > 0).astype(int)
    ds = Dataset(X, y)
    model, log = train(MlpConfig(units=(16,), activation="relu", lr=0.01, seed=0), ds, ds, max_epochs=200)
    assert (model.predict(X) == y).mean() >= 0.99
    assert model.mode == "inference"
    assert log.val_loss[log.best_epoch] == min(log.val_loss)


def test_training_is_reproducible():
    ds = blobs(30, sep=1.5, seed=3)
    cfg = MlpConfig(units=(6, 4), dropout_p=0.2, l2_lambda=1e-3, lr=3e-3, seed=11)
    m1, l1 = train(cfg, ds, ds, max_epochs=25)
    m2, l2 = train(cfg, ds, ds, max_epochs=25)
    assert l1.to_dict() == l2.to_dict()
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)


def test_training_needs_both_classes_in_validation():
    ds = blobs(10)
    with pytest.raises(DataError):
        train(MlpConfig(units=(3,)), ds, ds.subset(np.flatnonzero(ds.y == 0)))


def test_json_round_trip_bit_exact(rng):
    m = random_mlp(MlpConfig(units=(5, 3), activation="elu", dropout_p=0.1, seed=7), rng)
    back = MlpModel.from_dict(json.loads(json.dumps(m.to_dict())))
    assert back.config == m.config
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
    for k in m.buffers:
        assert np.array_equal(back.buffers[k], m.buffers[k])


def test_shape_mismatch_rejected(rng):
    d = random_mlp(MlpConfig(units=(5,)), rng).to_dict()
    d["params"]["W0"]["shape"] = [5, 12]
    with pytest.raises(ValueError):
        MlpModel.from_dict(d)
