"""Integrated Gradients over a straight-line path, with zero / mean /
random baselines, completeness residuals and per-sample reports.

Any model exposing ``output(X, target, of)`` and
``input_gradient(X, target, of)`` can be explained; ``of`` selects the
softmax probability (default) or the raw logit of the target class.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._util import DataError
from .dataio import SCHEMA, Dataset, FeatureSchema

logger = logging.getLogger(__name__)

BASELINE_KINDS = ("zero", "mean", "random")
RANDOM_DRAWS = 10
RULES = ("right", "midpoint")


class CompletenessWarning(RuntimeWarning):
    pass


class BaselineWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class Baseline:
    """Reference input(s). ``points`` is ``(K, n_features)``; K is 1 except
    for the random kind."""

    kind: str
    points: np.ndarray
    seed: int | None = None
    provenance: str = ""
    probs: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"baseline kind must be one of {BASELINE_KINDS}")
        pts = np.atleast_2d(np.asarray(self.points, dtype=float)).copy()
        pts.setflags(write=False)
        if not np.isfinite(pts).all() or len(pts) < 1:
            raise ValueError("baseline entries must be finite, with at least one draw")
        object.__setattr__(self, "points", pts)

    @property
    def x_prime(self) -> np.ndarray:
        return self.points[0] if len(self.points) == 1 else self.points.mean(axis=0)

    def to_dict(self):
        d = {"kind": self.kind, "x": [float(v) for v in self.x_prime]}
        if self.kind == "random":
            d["draws"] = [[float(v) for v in p] for p in self.points]
            d["seed"] = self.seed
        return d


def make_baseline(kind: str, train: Dataset, model=None, seed: int = 0, draws: int = RANDOM_DRAWS) -> Baseline:
    """Build a baseline from normalized training data.

    ``mean`` averages the two class-conditional means with equal weight;
    ``random`` draws uniformly inside each feature's training range. When a
    model is given, its class probabilities at the mean baseline are logged,
    with a warning if the fault probability is not within 0.2 of 0.5.
    """
    d = train.X.shape[1]
    if kind == "zero":
        return Baseline("zero", np.zeros((1, d)))
    if kind == "mean":
        if min(train.class_counts) == 0:
            raise DataError("mean baseline needs both classes in the training data")
        x = 0.5 * train.X[train.y == 1].mean(axis=0) + 0.5 * train.X[train.y == 0].mean(axis=0)
        probs = None
        if model is not None:
            p1 = float(model.predict_proba(x[None, :])[0])
            probs = (1.0 - p1, p1)
            logger.info("mean baseline class probabilities: non-fault %.4f, fault %.4f", *probs)
            if abs(p1 - 0.5) >= 0.2:
                warnings.warn(f"mean baseline is not uninformative: p(fault)={p1:.3f}", BaselineWarning,
                              stacklevel=2)
        return Baseline("mean", x[None, :], provenance="class-balanced training mean", probs=probs)
    if kind == "random":
        if draws < 1:
            raise ValueError("random baseline needs at least one draw")
        rng = np.random.default_rng(seed)
        lo, hi = train.X.min(axis=0), train.X.max(axis=0)
        return Baseline("random", rng.uniform(lo, hi, size=(draws, d)), seed=seed,
                        provenance="uniform over training range")
    raise ValueError(f"unknown baseline kind {kind!r}")


def interpolate(x, x_prime, m: int, rule: str = "right") -> np.ndarray:
    """Path points ``x' + a_k (x - x')``: ``a_k = k/m`` for k = 1..m with the
    right rule (last point is exactly ``x``), ``(k - 1/2)/m`` with midpoint."""
    if m < 1:
        raise ValueError("m must be at least 1")
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    k = np.arange(1, m + 1, dtype=float)
    alphas = k / m if rule == "right" else (k - 0.5) / m
    pts = x_prime + alphas[:, None] * (x - x_prime)
    if rule == "right":
        pts[-1] = x
    return pts


@dataclass
class AttributionResult:
    sample_id: int | None
    target_class: int
    baseline: Baseline
    m: int
    ig: np.ndarray
    delta: float
    F_x: float
    F_xprime: float
    x: np.ndarray = field(default=None, repr=False)
    of: str = "probability"
    rule: str = "right"


def _ig_single(model, x, x_prime, target, m, of, rule):
    pts = interpolate(x, x_prime, m, rule)
    grads = model.input_gradient(pts, target, of)
    ig = (x - x_prime) * grads.mean(axis=0)
    f = model.output(np.vstack([x, x_prime]), target, of)
    return ig, float(f[0]), float(f[1])


def integrated_gradients(model, x, baseline: Baseline, target: int = 1, m: int = 100, sample_id=None,
                         of: str = "probability", rule: str = "right") -> AttributionResult:
    """Riemann-sum Integrated Gradients.

    For a random baseline the attributions, model scores and residual are
    averaged over the draws.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if rule not in RULES:
        raise ValueError(f"rule must be one of {RULES}")
    if getattr(model, "mode", "inference") != "inference":
        raise RuntimeError("model must be in inference mode")
    if not getattr(model, "supports_input_gradient", False):
        raise TypeError(f"{type(model).__name__} does not provide input gradients")
    x = np.asarray(x, dtype=float)
    igs, fx, fxp = [], [], []
    for xp in baseline.points:
        ig, a, b = _ig_single(model, x, xp, target, m, of, rule)
        igs.append(ig)
        fx.append(a)
        fxp.append(b)
    ig = np.mean(igs, axis=0)
    F_x, F_xp = float(np.mean(fx)), float(np.mean(fxp))
    delta = float(ig.sum() - (F_x - F_xp))
    return AttributionResult(sample_id, target, baseline, m, ig, delta, F_x, F_xp, x, of, rule)


def select_m(model, samples, baseline: Baseline, target: int = 1, delta_tol: float = 1e-2,
             m_grid=(25, 50, 100, 200), rule: str = "right") -> int:
    """Smallest step count whose worst completeness residual over
    ``samples`` is below ``delta_tol``. Falls back to the largest grid value
    with a :class:`CompletenessWarning`."""
    samples = [np.asarray(s, dtype=float) for s in samples]
    if not samples:
        raise ValueError("select_m needs at least one sample")
    if not m_grid:
        raise ValueError("m_grid must be non-empty")
    worst = np.inf
    for m in m_grid:
        worst = max(abs(integrated_gradients(model, s, baseline, target, m, rule=rule).delta) for s in samples)
        if worst < delta_tol:
            return int(m)
    warnings.warn(f"no m in {tuple(m_grid)} reaches |delta| < {delta_tol:g} (worst {worst:.3g})",
                  CompletenessWarning, stacklevel=2)
    return int(m_grid[-1])


def attribution_report(result: AttributionResult, schema: FeatureSchema = SCHEMA, x_raw=None,
                       baseline_raw=None) -> dict:
    """Plot-ready record: per-feature value, baseline value, attribution and
    direction, ordered by |ig| (largest first, ties in schema order).

    ``x_raw`` / ``baseline_raw`` optionally replace the normalized values
    shown in the report, e.g. with physical units.
    """
    x = result.x if x_raw is None else np.asarray(x_raw)
    xb = result.baseline.x_prime if baseline_raw is None else np.asarray(baseline_raw)
    ig = result.ig
    order = sorted(range(len(ig)), key=lambda i: -abs(ig[i]))
    features = []
    for i in order:
        direction = "positive" if ig[i] > 0 else "negative" if ig[i] < 0 else "neutral"
        features.append({"name": schema.features[i], "x": None if x is None else float(x[i]),
                         "baseline": float(xb[i]), "ig": float(ig[i]), "direction": direction})
    baseline = result.baseline.to_dict()
    if baseline_raw is not None:
        baseline["x"] = [float(v) for v in xb]
    return {
        "sample_id": None if result.sample_id is None else int(result.sample_id),
        "target": "fault" if result.target_class == 1 else "non-fault",
        "m": result.m,
        "delta": result.delta,
        "F_x": result.F_x,
        "F_baseline": result.F_xprime,
        "baseline": baseline,
        "features": features,
    }
