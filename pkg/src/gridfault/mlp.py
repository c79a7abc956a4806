"""Multi-layer perceptron with batch normalization and dropout, trained
with Adam; exposes exact input gradients for attribution.

Each hidden block is ``dense -> batch norm -> activation -> dropout``; the
output layer is a plain dense map to two logits followed by softmax.
Dense kernels are stored as ``(fan_in, fan_out)`` arrays.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._util import DataError, NumericError
from .dataio import Dataset, class_weights, oversample_minority, sample_weights
from .metrics import f1_scores

ACTIVATIONS = ("relu", "tanh", "elu")
BN_EPS = 1e-5
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class MlpConfig:
    units: tuple[int, ...] = (32,)
    activation: str = "relu"
    dropout_p: float = 0.0
    l2_lambda: float = 0.0
    lr: float = 1e-3
    batch_size: int = 32
    bn_momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(int(u) for u in self.units))
        if any(u < 1 for u in self.units):
            raise ValueError("every block needs at least one unit")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must be in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    @property
    def L(self) -> int:
        return len(self.units)

    def to_dict(self):
        d = asdict(self)
        d["units"] = list(self.units)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "units": tuple(d["units"])})


# ------------------------------------------------------------------ activations

def _act(name, u):
    if name == "relu":
        return np.maximum(u, 0.0)
    if name == "tanh":
        return np.tanh(u)
    return np.where(u > 0, u, np.expm1(np.minimum(u, 0.0)))


def _act_grad(name, u, a):
    if name == "relu":
        return (u > 0).astype(float)
    if name == "tanh":
        return 1.0 - a * a
    return np.where(u > 0, 1.0, a + 1.0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ------------------------------------------------------------------ model

class MlpModel:
    """Parameters and running statistics of one network.

    ``params`` holds the trainable arrays (``W{l}``, ``b{l}``, ``gamma{l}``,
    ``beta{l}`` per block, ``W_out``, ``b_out``); ``buffers`` the batch-norm
    running ``mean{l}`` / ``var{l}``.
    """

    supports_input_gradient = True

    def __init__(self, config: MlpConfig, params=None, buffers=None, n_features: int = 12):
        self.config = config
        self.n_features = n_features
        self.mode = "inference"
        self._cache = None
        if params is None:
            params, buffers = _init_params(config, n_features, np.random.default_rng(_streams(config.seed)[0]))
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}
        self.buffers = {k: np.array(v, dtype=float) for k, v in buffers.items()}
        self._check_shapes()

    def _check_shapes(self):
        fan_in = self.n_features
        for l, n in enumerate(self.config.units):
            expected = {f"W{l}": (fan_in, n), f"b{l}": (n,), f"gamma{l}": (n,), f"beta{l}": (n,)}
            for k, shape in expected.items():
                if self.params[k].shape != shape:
                    raise ValueError(f"{k} has shape {self.params[k].shape}, expected {shape}")
            for k in (f"mean{l}", f"var{l}"):
                if self.buffers[k].shape != (n,):
                    raise ValueError(f"{k} has wrong shape")
            if (self.buffers[f"var{l}"] < 0).any():
                raise ValueError("running variance must be non-negative")
            fan_in = n
        if self.params["W_out"].shape != (fan_in, 2) or self.params["b_out"].shape != (2,):
            raise ValueError("output layer shape does not match the last block")

    # modes -------------------------------------------------------------

    def train_mode(self):
        self.mode = "train"
        return self

    def inference_mode(self):
        self.mode = "inference"
        self._cache = None
        return self

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    @property
    def kernels(self):
        return [self.params[f"W{l}"] for l in range(self.config.L)] + [self.params["W_out"]]

    # inference ------------------------------------------------------------

    def predict_proba(self, X):
        """Fault-class probability (inference mode semantics regardless of
        the current mode)."""
        _, probs = _forward_inference(self, np.atleast_2d(np.asarray(X, dtype=float)))
        return probs[:, 1]

    def predict(self, X):
        return (self.predict_proba(X) > 0.5).astype(int)

    def decision_function(self, X):
        logits, _ = _forward_inference(self, np.atleast_2d(np.asarray(X, dtype=float)))
        return logits[:, 1] - logits[:, 0]

    def output(self, X, target: int = 1, of: str = "probability"):
        self._require_inference()
        logits, probs = _forward_inference(self, np.atleast_2d(np.asarray(X, dtype=float)))
        return (logits if of == "logit" else probs)[:, target]

    def input_gradient(self, X, target: int = 1, of: str = "probability"):
        return input_gradient(self, X, target, of)

    def _require_inference(self):
        if self.mode != "inference":
            raise RuntimeError("model must be in inference mode")

    # persistence --------------------------------------------------------

    def to_dict(self):
        def pack(arrs):
            return {k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]} for k, v in arrs.items()}

        return {"kind": "mlp", "config": self.config.to_dict(), "n_features": self.n_features,
                "params": pack(self.params), "buffers": pack(self.buffers)}

    @classmethod
    def from_dict(cls, d):
        def unpack(arrs):
            return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in arrs.items()}

        return cls(MlpConfig.from_dict(d["config"]), unpack(d["params"]), unpack(d["buffers"]),
                   d.get("n_features", 12))

    def to_json(self):
        return json.dumps(self.to_dict())


def _streams(seed):
    """Independent generators' seeds: init, oversampling, shuffling, dropout."""
    return np.random.SeedSequence(int(seed)).spawn(4)


def _init_params(config: MlpConfig, n_features: int, rng):
    params, buffers = {}, {}
    fan_in = n_features
    for l, n in enumerate(config.units):
        limit = math.sqrt(6.0 / (fan_in + n))
        params[f"W{l}"] = rng.uniform(-limit, limit, size=(fan_in, n))
        params[f"b{l}"] = np.zeros(n)
        params[f"gamma{l}"] = np.ones(n)
        params[f"beta{l}"] = np.zeros(n)
        buffers[f"mean{l}"] = np.zeros(n)
        buffers[f"var{l}"] = np.ones(n)
        fan_in = n
    limit = math.sqrt(6.0 / (fan_in + 2))
    params["W_out"] = rng.uniform(-limit, limit, size=(fan_in, 2))
    params["b_out"] = np.zeros(2)
    return params, buffers


# ------------------------------------------------------------------ forward

def _forward_inference(model: MlpModel, X):
    p, buf, act = model.params, model.buffers, model.config.activation
    h = X
    for l in range(model.config.L):
        z = h @ p[f"W{l}"] + p[f"b{l}"]
        xhat = (z - buf[f"mean{l}"]) / np.sqrt(buf[f"var{l}"] + BN_EPS)
        h = _act(act, p[f"gamma{l}"] * xhat + p[f"beta{l}"])
    logits = h @ p["W_out"] + p["b_out"]
    return logits, softmax(logits)


def dropout_masks(model: MlpModel, batch_size: int, rng) -> list:
    """Inverted-dropout masks (entries 0 or 1/(1-p)) for one batch."""
    prob = model.config.dropout_p
    if prob == 0:
        return [None] * model.config.L
    return [(rng.random((batch_size, n)) >= prob) / (1.0 - prob) for n in model.config.units]


def forward(model: MlpModel, batch, masks=None, rng=None, update_stats: bool = True):
    """Returns ``(logits, probs)``.

    In train mode batch statistics normalize each block, dropout masks are
    applied (drawn from ``rng`` unless given explicitly) and the running
    statistics are updated when ``update_stats`` is set; the intermediate
    values are cached for :func:`backward`.
    """
    X = np.atleast_2d(np.asarray(batch, dtype=float))
    if model.mode != "train":
        return _forward_inference(model, X)
    n = len(X)
    if n < 2:
        raise DataError("train-mode forward needs a batch of at least 2 samples")
    cfg, p, buf = model.config, model.params, model.buffers
    if masks is None:
        masks = dropout_masks(model, n, rng if rng is not None else np.random.default_rng())
    m = cfg.bn_momentum
    cache = []
    h = X
    for l in range(cfg.L):
        z = h @ p[f"W{l}"] + p[f"b{l}"]
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mu) * inv_std
        u = p[f"gamma{l}"] * xhat + p[f"beta{l}"]
        a = _act(cfg.activation, u)
        out = a if masks[l] is None else a * masks[l]
        cache.append((h, xhat, inv_std, u, a, masks[l]))
        if update_stats:
            buf[f"mean{l}"] = m * buf[f"mean{l}"] + (1 - m) * mu
            buf[f"var{l}"] = m * buf[f"var{l}"] + (1 - m) * var
        h = out
    logits = h @ p["W_out"] + p["b_out"]
    probs = softmax(logits)
    model._cache = (cache, h, probs)
    return logits, probs


# ------------------------------------------------------------------ loss / backward

def loss(probs, labels, weights=None, l2_lambda: float = 0.0, kernels=()) -> float:
    """Weighted mean of ``-log p[label]`` plus ``l2_lambda * sum |W|^2``."""
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=int)
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=float)
    picked = np.clip(probs[np.arange(len(labels)), labels], PROB_FLOOR, 1.0)
    data = float(np.sum(w * -np.log(picked)) / np.sum(w))
    return data + l2_lambda * float(sum(np.sum(K * K) for K in kernels))


def model_loss(model: MlpModel, probs, labels, weights=None) -> float:
    return loss(probs, labels, weights, model.config.l2_lambda, model.kernels)


def backward(model: MlpModel, labels, weights=None) -> dict:
    """Gradients of :func:`model_loss` for every trainable array, using the
    cache of the last train-mode :func:`forward`."""
    if model._cache is None:
        raise RuntimeError("backward needs a preceding train-mode forward")
    cache, h_last, probs = model._cache
    cfg, p = model.config, model.params
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    coef = w / w.sum()
    # the probability clamp has zero slope where it is active
    coef = np.where(probs[np.arange(n), labels] < PROB_FLOOR, 0.0, coef)
    dlogits = (probs - onehot) * coef[:, None]
    lam2 = 2.0 * cfg.l2_lambda
    grads = {
        "W_out": h_last.T @ dlogits + lam2 * p["W_out"],
        "b_out": dlogits.sum(axis=0),
    }
    dh = dlogits @ p["W_out"].T
    for l in reversed(range(cfg.L)):
        h_in, xhat, inv_std, u, a, mask = cache[l]
        da = dh if mask is None else dh * mask
        du = da * _act_grad(cfg.activation, u, a)
        grads[f"gamma{l}"] = np.sum(du * xhat, axis=0)
        grads[f"beta{l}"] = du.sum(axis=0)
        dxhat = du * p[f"gamma{l}"]
        dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        grads[f"W{l}"] = h_in.T @ dz + lam2 * p[f"W{l}"]
        grads[f"b{l}"] = dz.sum(axis=0)
        dh = dz @ p[f"W{l}"].T
    return grads


def input_gradient(model: MlpModel, x, target: int = 1, of: str = "probability"):
    """Exact gradient of the target-class probability (or raw logit) with
    respect to the inputs; ``x`` may be one vector or a batch of rows."""
    model._require_inference()
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    cfg, p, buf = model.config, model.params, model.buffers
    h = X
    saved = []
    for l in range(cfg.L):
        z = h @ p[f"W{l}"] + p[f"b{l}"]
        scale = p[f"gamma{l}"] / np.sqrt(buf[f"var{l}"] + BN_EPS)
        u = (z - buf[f"mean{l}"]) * scale + p[f"beta{l}"]
        a = _act(cfg.activation, u)
        saved.append((scale, u, a))
        h = a
    logits = h @ p["W_out"] + p["b_out"]
    dlogits = np.zeros_like(logits)
    if of == "logit":
        dlogits[:, target] = 1.0
    elif of == "probability":
        probs = softmax(logits)
        dlogits = -probs[:, [target]] * probs
        dlogits[:, target] += probs[:, target]
    else:
        raise ValueError("of must be 'probability' or 'logit'")
    dh = dlogits @ p["W_out"].T
    for l in reversed(range(cfg.L)):
        scale, u, a = saved[l]
        dz = dh * _act_grad(cfg.activation, u, a) * scale
        dh = dz @ p[f"W{l}"].T
    return dh[0] if single else dh


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, t: int | None = None):
    """One bias-corrected Adam update. Returns new ``(params, state)``; the
    inputs are left untouched."""
    t = state.t + 1 if t is None else t
    new_params, m_new, v_new = {}, {}, {}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, theta in params.items():
        g = grads[k]
        m = beta1 * state.m.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1.0 - beta2) * g * g
        new_params[k] = theta - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t)


# ------------------------------------------------------------------ training

class PlateauSchedule:
    """Learning-rate halving on a validation plateau plus early stopping.

    After every epoch call :meth:`update` with the validation loss. ``lr``
    is the rate for the next epoch.
    """

    def __init__(self, lr: float, lr_patience: int = 10, factor: float = 0.5, stop_patience: int = 30):
        self.lr = lr
        self.lr_patience = lr_patience
        self.factor = factor
        self.stop_patience = stop_patience
        self.best = math.inf
        self.best_epoch = -1
        self._wait_lr = 0
        self._wait_stop = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self._wait_lr = self._wait_stop = 0
            return True
        self._wait_lr += 1
        self._wait_stop += 1
        if self._wait_lr >= self.lr_patience:
            self.lr *= self.factor
            self._wait_lr = 0
        return False

    @property
    def should_stop(self) -> bool:
        return self._wait_stop >= self.stop_patience


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    stop_epoch: int = -1
    stop_reason: str = ""

    def to_dict(self):
        return asdict(self)


def _batches(n: int, size: int, rng):
    order = rng.permutation(n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    # a trailing batch of one cannot be batch-normalized; fold it into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def evaluate_loss(model: MlpModel, ds: Dataset) -> float:
    """Class-balanced validation loss (inference mode) including the L2 term."""
    _, probs = _forward_inference(model, ds.X)
    return model_loss(model, probs, ds.y, sample_weights(ds.y, class_weights(ds)))


def train(config: MlpConfig, train: Dataset, val: Dataset, max_epochs: int = 500, patience: int = 30,
          lr_patience: int = 10, lr_factor: float = 0.5):
    """Fit a fresh model; returns ``(model, log)``.

    The minority class of ``train`` is oversampled once up front. The
    parameters with the lowest validation loss are restored at the end.
    """
    if min(val.class_counts) == 0:
        raise DataError("validation set must contain both classes")
    init_ss, over_ss, shuffle_ss, drop_ss = _streams(config.seed)
    model = MlpModel(config, n_features=train.X.shape[1])
    balanced = oversample_minority(train, seed=int(over_ss.generate_state(1)[0]))
    X, y = balanced.X, balanced.y
    if len(X) < 2:
        raise DataError("training set too small")
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    sched = PlateauSchedule(config.lr, lr_patience, lr_factor, patience)
    state = AdamState()
    log = TrainLog()
    best = (copy.deepcopy(model.params), copy.deepcopy(model.buffers))
    for epoch in range(max_epochs):
        lr = sched.lr
        model.train_mode()
        total, count = 0.0, 0
        for idx in _batches(len(X), config.batch_size, shuffle_rng):
            _, probs = forward(model, X[idx], rng=drop_rng)
            total += model_loss(model, probs, y[idx]) * len(idx)
            count += len(idx)
            grads = backward(model, y[idx])
            model.params, state = adam_step(model.params, grads, state, lr)
        model.inference_mode()
        train_loss = total / count
        val_loss = evaluate_loss(model, val)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        log.train_loss.append(train_loss)
        log.val_loss.append(val_loss)
        log.val_f1.append(f1_scores(val.y, model.predict(val.X))[2])
        log.lr.append(lr)
        if sched.update(epoch, val_loss):
            best = (copy.deepcopy(model.params), copy.deepcopy(model.buffers))
        if sched.should_stop:
            log.stop_reason = "early_stop"
            break
    else:
        log.stop_reason = "max_epochs"
    log.stop_epoch = len(log.val_loss) - 1
    log.best_epoch = sched.best_epoch
    model.params, model.buffers = best
    return model.inference_mode(), log
