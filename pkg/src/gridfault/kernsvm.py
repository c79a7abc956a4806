"""RBF-kernel SVM trained by kernelized stochastic subgradient descent."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._util import DataError, NumericError
from .dataio import Dataset, sample_weights

PRUNE_TOL = 1e-10


def rbf_kernel(a, b, gamma: float) -> float:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.exp(-gamma * (d @ d)))


def rbf_matrix(A, B, gamma: float) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def scale_gamma(X) -> float:
    """The 'scale' width: 1 / (n_features * Var(X))."""
    X = np.asarray(X, dtype=float)
    var = X.var()
    return 1.0 / (X.shape[1] * var) if var > 0 else 1.0


@dataclass(eq=False)
class KernelModel:
    support_x: np.ndarray
    alpha: np.ndarray
    b: float
    gamma: float
    C: float

    supports_input_gradient = False

    def __post_init__(self):
        self.support_x = np.asarray(self.support_x, dtype=float).reshape(-1, 12)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if len(self.alpha) != len(self.support_x):
            raise ValueError("one coefficient per support vector")
        if not np.isfinite(self.alpha).all() or not np.isfinite(self.b):
            raise NumericError("non-finite kernel coefficients")

    def decision_function(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if len(self.alpha) == 0:
            return np.full(len(X), float(self.b))
        return rbf_matrix(X, self.support_x, self.gamma) @ self.alpha + self.b

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def predict_proba(self, X):
        # ranking score only, no calibration
        return 1.0 / (1.0 + np.exp(-np.clip(self.decision_function(X), -500, 500)))

    def to_dict(self):
        return {"gamma": float(self.gamma), "C": float(self.C), "b": float(self.b),
                "support": [[float(v) for v in row] for row in self.support_x],
                "alpha": [float(a) for a in self.alpha]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["support"], dtype=float).reshape(-1, 12), np.array(d["alpha"], dtype=float),
                   d["b"], d["gamma"], d["C"])

    def to_json(self):
        return json.dumps(self.to_dict())


def kernel_decision(model: KernelModel, x):
    score = float(model.decision_function(np.asarray(x, dtype=float)[None, :])[0])
    return score, int(score > 0)


def fit_rbf_svm(train: Dataset, C: float, gamma: float | str = "scale", weights=(1.0, 1.0),
                epochs: int = 30, seed: int = 0) -> KernelModel:
    """Kernel Pegasos on the class-weighted hinge objective with an
    unpenalized bias.

    The iterate after ``t`` steps is ``f(x) = sum_j c_j k(x_j, x) / (lam t) + b``
    where ``c_j`` accumulates ``omega_j y_j`` over the steps at which sample
    ``j`` violated the margin. Coefficients are averaged over the second half
    of the run.
    """
    if min(train.class_counts) == 0:
        raise DataError("RBF SVM needs both classes in the training set")
    if C <= 0:
        raise ValueError("C must be positive")
    X = train.X
    if gamma == "scale":
        gamma = scale_gamma(X)
    gamma = float(gamma)
    t_lab = 2.0 * train.y - 1.0
    omega = sample_weights(train.y, weights)
    n = len(X)
    lam = 1.0 / (C * n)
    K = rbf_matrix(X, X, gamma)
    rng = np.random.default_rng(seed)

    c = np.zeros(n)
    s = np.zeros(n)  # K @ c
    b = 0.0
    total = epochs * n
    avg_from = total // 2 + 1
    alpha_acc = np.zeros(n)
    b_sum = 0.0
    weight_since_flush = 0.0  # sum of 1/(lam t) over averaged steps since c last changed
    step_no = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            step_no += 1
            inv = 1.0 / (lam * step_no)
            if t_lab[i] * (s[i] * inv + b) < 1.0:
                if weight_since_flush:
                    alpha_acc += weight_since_flush * c
                    weight_since_flush = 0.0
                g = omega[i] * t_lab[i]
                c[i] += g
                s += g * K[:, i]
                b += inv * g
            if step_no >= avg_from:
                weight_since_flush += inv
                b_sum += b
    alpha_acc += weight_since_flush * c
    count = total - avg_from + 1
    alpha = alpha_acc / count
    b_avg = b_sum / count
    keep = np.abs(alpha) >= PRUNE_TOL
    return KernelModel(X[keep], alpha[keep], b_avg, gamma, C)
