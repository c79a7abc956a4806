"""Shared test utilities: analytic scorers, model surgery and small data."""

import numpy as np

from gridfault._util import sigmoid
from gridfault.dataio import Dataset
from gridfault.mlp import MlpConfig, MlpModel

PLANTED_MLP = {"units": [16], "activation": "tanh", "dropout_p": 0.1, "l2_lambda": 0.03, "lr": 3e-3,
               "batch_size": 32, "bn_momentum": 0.9, "seed": 1}


class LinearScorer:
    """F(x) = w.x + b with a constant gradient; the IG closed-form oracle."""

    supports_input_gradient = True
    mode = "inference"

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=float)
        self.b = float(b)

    def output(self, X, target=1, of="probability"):
        return np.atleast_2d(X) @ self.w + self.b

    def input_gradient(self, X, target=1, of="probability"):
        X = np.asarray(X, dtype=float)
        return np.broadcast_to(self.w, X.shape).copy()

    def predict_proba(self, X):
        return sigmoid(self.output(X))


class LogisticScorer(LinearScorer):
    """F(x) = sigmoid(w.x + b)."""

    def output(self, X, target=1, of="probability"):
        return sigmoid(np.atleast_2d(X) @ self.w + self.b)

    def input_gradient(self, X, target=1, of="probability"):
        p = sigmoid(np.atleast_2d(X) @ self.w + self.b)
        g = (p * (1 - p))[:, None] * self.w
        return g[0] if np.asarray(X).ndim == 1 else g


def random_mlp(config: MlpConfig, rng, n_features=12, scale=0.5) -> MlpModel:
    """A model with perturbed parameters and non-trivial running statistics."""
    model = MlpModel(config, n_features=n_features)
    for k, v in model.params.items():
        model.params[k] = v + rng.normal(scale=scale, size=v.shape)
    for l in range(config.L):
        n = config.units[l]
        model.buffers[f"mean{l}"] = rng.normal(scale=0.3, size=n)
        model.buffers[f"var{l}"] = rng.uniform(0.5, 2.0, size=n)
    return model


def split_hidden_unit(model: MlpModel, layer: int, unit: int) -> MlpModel:
    """Functionally identical model with one hidden unit split into two
    copies, each feeding half of the original outgoing weights.

    Both copies share the incoming weights and batch-norm parameters, so in
    inference mode they carry the same activation and the next layer sees
    the same weighted sum.
    """
    p = {k: v.copy() for k, v in model.params.items()}
    buf = {k: v.copy() for k, v in model.buffers.items()}
    for key, store in ((f"W{layer}", p), (f"b{layer}", p), (f"gamma{layer}", p), (f"beta{layer}", p),
                       (f"mean{layer}", buf), (f"var{layer}", buf)):
        arr = store[key]
        store[key] = np.concatenate([arr, arr[..., [unit]]], axis=-1)
    nxt = f"W{layer + 1}" if layer + 1 < model.config.L else "W_out"
    W = p[nxt]
    W[unit] *= 0.5
    p[nxt] = np.vstack([W, W[[unit]]])
    units = list(model.config.units)
    units[layer] += 1
    cfg = MlpConfig.from_dict({**model.config.to_dict(), "units": units})
    return MlpModel(cfg, p, buf, model.n_features)


def blobs(n_per_class=50, d=12, sep=3.0, seed=0):
    """Two Gaussian blobs separated along the first axis."""
    rng = np.random.default_rng(seed)
    X0 = rng.normal(size=(n_per_class, d))
    X1 = rng.normal(size=(n_per_class, d))
    X1[:, 0] += sep
    X = np.vstack([X0, X1])
    y = np.r_[np.zeros(n_per_class, int), np.ones(n_per_class, int)]
    return Dataset(X, y)


def padded(rows):
    """Zero-pad short feature rows to 12 columns."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    out = np.zeros((len(rows), 12))
    out[:, :rows.shape[1]] = rows
    return out
