"""Class-weighted linear classifiers: ridge, logistic regression and a
primal linear SVM, plus coefficient-magnitude importance."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._util import NumericError, sigmoid
from .dataio import SCHEMA, Dataset, FeatureSchema, sample_weights

KINDS = ("ridge", "logistic", "linear_svm")


@dataclass(eq=False)
class LinearModel:
    """Fitted linear classifier ``score = w.x + b``.

    ``lam`` is the regularization value the model was fit with: the ridge /
    logistic penalty, or the SVM penalty ``C`` for ``linear_svm``.
    Probabilities are not calibrated: ridge maps the margin to
    ``clip((score + 1) / 2, 0, 1)``, the SVM to ``sigmoid(score)``.
    """

    kind: str
    w: np.ndarray
    b: float
    lam: float
    norm_stats_id: str | None = None
    converged: bool = True
    n_iter: int = 0
    history: list = field(default_factory=list, repr=False)

    supports_input_gradient = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown linear model kind {self.kind!r}")
        self.w = np.asarray(self.w, dtype=float)
        self.b = float(self.b)
        if not np.isfinite(self.w).all() or not np.isfinite(self.b):
            raise NumericError("non-finite linear coefficients")

    def decision_function(self, X):
        return np.asarray(X, dtype=float) @ self.w + self.b

    def predict_proba(self, X):
        """Probability of the fault class."""
        s = self.decision_function(X)
        if self.kind == "ridge":
            return np.clip((s + 1.0) / 2.0, 0.0, 1.0)
        return sigmoid(s)

    def predict(self, X):
        # ties (score 0, probability 0.5) go to the majority class 0
        return (self.decision_function(X) > 0).astype(int)

    def decision(self, x):
        x = np.asarray(x, dtype=float)[None, :]
        return float(self.decision_function(x)[0]), int(self.predict(x)[0]), float(self.predict_proba(x)[0])

    # attribution hooks ------------------------------------------------

    def output(self, X, target: int = 1, of: str = "probability"):
        if of == "logit":
            s = self.decision_function(X)
            return s if target == 1 else -s
        p = self.predict_proba(X)
        return p if target == 1 else 1.0 - p

    def input_gradient(self, X, target: int = 1, of: str = "probability"):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        sign = 1.0 if target == 1 else -1.0
        if of == "logit":
            return np.tile(sign * self.w, (len(X), 1))
        s = self.decision_function(X)
        if self.kind == "ridge":
            inside = np.abs(s) < 1.0
            slope = np.where(inside, 0.5, 0.0)
        else:
            p = sigmoid(s)
            slope = p * (1.0 - p)
        return sign * slope[:, None] * self.w[None, :]

    # persistence --------------------------------------------------------

    def to_dict(self):
        return {"kind": self.kind, "w": [float(v) for v in self.w], "b": self.b,
                "lambda": float(self.lam), "norm_stats_id": self.norm_stats_id}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], np.array(d["w"], dtype=float), d["b"], d["lambda"], d.get("norm_stats_id"))

    def to_json(self):
        return json.dumps(self.to_dict())


def _targets(y):
    return 2.0 * np.asarray(y, dtype=float) - 1.0


# ------------------------------------------------------------------ ridge

def ridge_objective(X, t, omega, lam, w, b):
    r = X @ w + b - t
    return float(np.sum(omega * r * r) + lam * w @ w)


def fit_ridge(train: Dataset, lam: float, weights=(1.0, 1.0), norm_stats_id=None) -> LinearModel:
    """Weighted least squares on +-1 targets with an unpenalized intercept,
    solved through the normal equations."""
    if lam <= 0:
        raise ValueError("ridge needs lam > 0")
    X, t = train.X, _targets(train.y)
    omega = sample_weights(train.y, weights)
    A = np.hstack([X, np.ones((len(X), 1))])
    G = A.T @ (omega[:, None] * A)
    G[np.arange(X.shape[1]), np.arange(X.shape[1])] += lam
    rhs = A.T @ (omega * t)
    try:
        theta = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"ridge normal equations are singular: {exc}") from exc
    if not np.isfinite(theta).all():
        raise NumericError("ridge solution is not finite")
    return LinearModel("ridge", theta[:-1], theta[-1], lam, norm_stats_id)


# ------------------------------------------------------------------ logistic

def logistic_objective(X, y, omega, lam, w, b):
    z = X @ w + b
    return float(np.sum(omega * (np.logaddexp(0.0, z) - y * z)) + 0.5 * lam * w @ w)


def logistic_gradient(X, y, omega, lam, w, b):
    r = omega * (sigmoid(X @ w + b) - y)
    return X.T @ r + lam * w, float(r.sum())


def fit_logistic(train: Dataset, lam: float, weights=(1.0, 1.0), max_iter: int = 5000,
                 tol: float = 1e-6, norm_stats_id=None) -> LinearModel:
    """Full-batch gradient descent with Armijo backtracking.

    Stops when the gradient infinity-norm drops below ``tol``; hitting
    ``max_iter`` first leaves ``converged=False`` on the returned model, as
    does a stall where the objective stops changing in floating point
    before ``tol`` is reached. ``history`` holds the objective after every
    accepted step.
    """
    X, y = train.X, np.asarray(train.y, dtype=float)
    omega = sample_weights(train.y, weights)
    w, b = np.zeros(X.shape[1]), 0.0
    f = logistic_objective(X, y, omega, lam, w, b)
    history = [f]
    step = 1.0
    converged = False
    stalled = 0
    it = 0
    for it in range(1, max_iter + 1):
        gw, gb = logistic_gradient(X, y, omega, lam, w, b)
        gnorm = max(np.max(np.abs(gw)), abs(gb))
        if gnorm < tol:
            converged = True
            break
        sq = gw @ gw + gb * gb
        step = min(step * 2.0, 1e6)
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            f_new = logistic_objective(X, y, omega, lam, w_new, b_new)
            if f_new <= f - 1e-4 * step * sq:
                break
            step *= 0.5
            if step < 1e-20:
                raise NumericError("logistic line search failed to find descent")
        stalled = stalled + 1 if f_new == f else 0
        w, b, f = w_new, b_new, f_new
        history.append(f)
        if stalled >= 10:
            break
    return LinearModel("logistic", w, b, lam, norm_stats_id, converged=converged, n_iter=it, history=history)


# ------------------------------------------------------------------ linear SVM

def svm_objective(X, y, omega, C, w, b):
    t = _targets(y)
    hinge = np.maximum(0.0, 1.0 - t * (X @ w + b))
    return float(0.5 * w @ w + C * np.sum(omega * hinge))


def fit_linear_svm(train: Dataset, C: float, weights=(1.0, 1.0), epochs: int = 50, seed: int = 0,
                   norm_stats_id=None) -> LinearModel:
    """Pegasos-style stochastic subgradient on
    ``0.5 |w|^2 + C sum_i omega_i hinge_i`` with an unpenalized intercept.

    Rescaled as ``lam/2 |w|^2 + mean(omega * hinge)`` with
    ``lam = 1 / (C n)``; step ``1 / (lam t)``; the returned coefficients are
    the average of the iterates over the second half of the run.
    """
    if C <= 0:
        raise ValueError("C must be positive")
    X = train.X
    t_lab = _targets(train.y)
    omega = sample_weights(train.y, weights)
    n, d = X.shape
    lam = 1.0 / (C * n)
    rng = np.random.default_rng(seed)
    total = epochs * n
    avg_from = total // 2 + 1
    w = np.zeros(d)
    b = 0.0
    w_sum = np.zeros(d)
    b_sum = 0.0
    step_no = 0
    rows = [X[i] for i in range(n)]
    for _ in range(epochs):
        for i in rng.permutation(n):
            step_no += 1
            eta = 1.0 / (lam * step_no)
            xi = rows[i]
            margin = t_lab[i] * (xi @ w + b)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                g = eta * omega[i] * t_lab[i]
                w += g * xi
                b += g
            if step_no >= avg_from:
                w_sum += w
                b_sum += b
    count = total - avg_from + 1
    return LinearModel("linear_svm", w_sum / count, b_sum / count, C, norm_stats_id, n_iter=total)


# ------------------------------------------------------------------ interpretation

def decision(model: LinearModel, x):
    return model.decision(x)


def coefficient_importance(model: LinearModel, schema: FeatureSchema = SCHEMA):
    """Features ranked by |w_i|, largest first; ties keep schema order."""
    mags = np.abs(model.w)
    order = sorted(range(len(mags)), key=lambda i: -mags[i])
    return [(schema.features[i], float(mags[i])) for i in order]
