"""Model selection and evaluation: grid / random search and the stratified
cross-validation protocol.

Per outer fold: normalization statistics come from the training portion
only; a stratified 80/20 split of that portion selects hyperparameters; the
chosen model is refit on the whole training portion and scored on the
held-out fold.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ._util import derive_seed
from .dataio import Dataset, FoldPlan, apply_norm, class_weights, fit_norm, stratified_holdout
from .kernsvm import fit_rbf_svm
from .linmod import fit_linear_svm, fit_logistic, fit_ridge
from .metrics import ConfusionMatrix, confusion, f1, f1_scores, weighted_f1  # noqa: F401
from .mlp import ACTIVATIONS, MlpConfig, train

logger = logging.getLogger(__name__)

MODEL_KINDS = ("ridge", "logistic", "linear_svm", "rbf_svm", "mlp")
DISPLAY_NAMES = {
    "ridge": "Ridge Classifier",
    "logistic": "Logistic regression",
    "linear_svm": "LinearSVC",
    "rbf_svm": "RBFSVC",
    "mlp": "MLP",
}
LOG_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class SearchSpace:
    layers: tuple[int, ...] = (1, 2, 3)
    units: tuple[int, ...] = (8, 16, 32, 64)
    l2_range: tuple[float, float] = (1e-5, 1e-1)
    dropout_range: tuple[float, float] = (0.0, 0.5)
    lr_range: tuple[float, float] = (1e-4, 1e-2)
    activations: tuple[str, ...] = ACTIVATIONS
    linear_grid: tuple[float, ...] = LOG_GRID
    rbf_C: tuple[float, ...] = (1e-2, 1e-1, 1.0, 10.0, 100.0)
    rbf_gamma: tuple = ("scale", 0.01, 0.1, 1.0)
    svm_epochs: int = 50
    rbf_epochs: int = 30
    mlp_max_epochs: int = 500
    logistic_max_iter: int = 5000

    def __post_init__(self):
        for name in ("layers", "units", "activations", "linear_grid", "rbf_C", "rbf_gamma"):
            if not getattr(self, name):
                raise ValueError(f"search range {name} is empty")
        for name in ("l2_range", "dropout_range", "lr_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"search range {name} is empty")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)

    def sample_mlp(self, rng, seed: int) -> MlpConfig:
        def log_uniform(lo, hi):
            return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))

        depth = int(rng.choice(self.layers))
        return MlpConfig(
            units=tuple(int(rng.choice(self.units)) for _ in range(depth)),
            activation=str(rng.choice(self.activations)),
            dropout_p=float(rng.uniform(*self.dropout_range)),
            l2_lambda=log_uniform(*self.l2_range),
            lr=log_uniform(*self.lr_range),
            seed=seed,
        )


@dataclass
class EvalReport:
    fold: int | None
    confusion: ConfusionMatrix
    f1_fault: float
    f1_nonfault: float
    f1_weighted: float
    hyperparams: dict
    kind: str

    def to_dict(self):
        return {"fold": self.fold, "kind": self.kind, **self.confusion.to_dict(), "f1_fault": self.f1_fault,
                "f1_nonfault": self.f1_nonfault, "weighted_f1": self.f1_weighted,
                "hyperparams": self.hyperparams}


def evaluate(model, ds: Dataset, kind: str, hyperparams: dict, fold=None) -> EvalReport:
    pred = model.predict(ds.X)
    cm = confusion(ds.y, pred)
    f_fault, f_non = f1(cm, 1), f1(cm, 0)
    f_w = weighted_f1((f_fault, f_non), (cm.tp + cm.fn, cm.tn + cm.fp))
    return EvalReport(fold, cm, f_fault, f_non, f_w, hyperparams, kind)


def fit_classifier(kind: str, hp: dict, train_ds: Dataset, val_ds: Dataset | None, space: SearchSpace,
                   seed: int = 0, norm_stats_id=None):
    """Fit one model of ``kind`` with hyperparameters ``hp`` on normalized
    data. ``val_ds`` is only used by the MLP (early stopping)."""
    if kind == "mlp":
        model, _ = train(MlpConfig.from_dict(hp), train_ds, val_ds, max_epochs=space.mlp_max_epochs)
        return model
    weights = class_weights(train_ds)
    if kind == "ridge":
        return fit_ridge(train_ds, hp["lambda"], weights, norm_stats_id=norm_stats_id)
    if kind == "logistic":
        return fit_logistic(train_ds, hp["lambda"], weights, max_iter=space.logistic_max_iter,
                            norm_stats_id=norm_stats_id)
    if kind == "linear_svm":
        return fit_linear_svm(train_ds, hp["C"], weights, epochs=space.svm_epochs, seed=seed,
                              norm_stats_id=norm_stats_id)
    if kind == "rbf_svm":
        return fit_rbf_svm(train_ds, hp["C"], hp["gamma"], weights, epochs=space.rbf_epochs, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


def grid_candidates(kind: str, space: SearchSpace) -> list[dict]:
    if kind in ("ridge", "logistic"):
        return [{"lambda": v} for v in space.linear_grid]
    if kind == "linear_svm":
        return [{"C": v} for v in space.linear_grid]
    if kind == "rbf_svm":
        return [{"C": c, "gamma": g} for c in space.rbf_C for g in space.rbf_gamma]
    raise ValueError(f"no grid for model kind {kind!r}")


def _regularization_rank(hp: dict) -> float:
    # larger means stronger regularization
    if "lambda" in hp:
        return hp["lambda"]
    return -hp["C"]


@dataclass
class SearchResult:
    best: dict
    report: EvalReport
    trials: list = field(default_factory=list)


def grid_search(kind: str, space: SearchSpace, train_ds: Dataset, val_ds: Dataset, seed: int = 0) -> SearchResult:
    """Exhaustive search; best validation weighted F1, ties to the stronger
    regularization and then to the earlier grid point."""
    trials = []
    for hp in grid_candidates(kind, space):
        model = fit_classifier(kind, hp, train_ds, val_ds, space, seed)
        trials.append((hp, evaluate(model, val_ds, kind, hp)))
    best = max(range(len(trials)),
               key=lambda i: (trials[i][1].f1_weighted, _regularization_rank(trials[i][0]), -i))
    return SearchResult(trials[best][0], trials[best][1], trials)


def random_search(space: SearchSpace, budget: int, seed: int, train_ds: Dataset, val_ds: Dataset) -> SearchResult:
    """Seeded random search over MLP configurations; ties go to the earlier
    trial. ``trials`` keeps every (config, report) pair in draw order."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = np.random.default_rng(seed)
    trials = []
    best_i = 0
    for i in range(budget):
        cfg = space.sample_mlp(rng, derive_seed(seed, i))
        model, _ = train(cfg, train_ds, val_ds, max_epochs=space.mlp_max_epochs)
        hp = cfg.to_dict()
        trials.append((hp, evaluate(model, val_ds, "mlp", hp)))
        if trials[i][1].f1_weighted > trials[best_i][1].f1_weighted:
            best_i = i
        logger.debug("trial %d: wF1 %.4f", i, trials[i][1].f1_weighted)
    return SearchResult(trials[best_i][0], trials[best_i][1], trials)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    space: SearchSpace = SearchSpace()
    budget: int = 200
    fixed: dict | None = None  # skip search and use these hyperparameters

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")


def select_and_fit(spec: ModelSpec, train_ds: Dataset, seed: int, norm_stats_id=None):
    """Hyperparameter selection on an inner stratified 80/20 split, then a
    refit on all of ``train_ds`` (already normalized).

    Returns ``(model, hyperparams, search_result)``; ``search_result`` is None
    when ``spec.fixed`` supplies the hyperparameters. The MLP refit reuses the
    inner validation part for early stopping.
    """
    inner_tr, inner_va = stratified_holdout(train_ds.y, 0.2, derive_seed(seed, 1))
    fit_part, val_part = train_ds.subset(inner_tr), train_ds.subset(inner_va)
    search_seed = derive_seed(seed, 2)
    result = None
    if spec.fixed is not None:
        hp = dict(spec.fixed)
    elif spec.kind == "mlp":
        result = random_search(spec.space, spec.budget, search_seed, fit_part, val_part)
        hp = result.best
    else:
        result = grid_search(spec.kind, spec.space, fit_part, val_part, search_seed)
        hp = result.best
    model = fit_classifier(spec.kind, hp, train_ds, val_part, spec.space, search_seed, norm_stats_id)
    return model, hp, result


def run_fold(spec: ModelSpec, ds: Dataset, plan: FoldPlan, fold: int, seed: int):
    """One outer fold; returns ``(report, model, norm_stats)``."""
    train_raw, test_raw = ds.subset(plan.train_indices(fold)), ds.subset(plan.test_indices(fold))
    if min(test_raw.class_counts) == 0 or min(train_raw.class_counts) == 0:
        raise ValueError(f"fold {fold} is missing a class")
    stats = fit_norm(train_raw)
    train_ds, test_ds = apply_norm(train_raw, stats), apply_norm(test_raw, stats)
    model, hp, _ = select_and_fit(spec, train_ds, derive_seed(seed, fold), stats.id)
    return evaluate(model, test_ds, spec.kind, hp, fold), model, stats


def _run_fold_star(args):
    return run_fold(*args)


@dataclass
class CrossValResult:
    kind: str
    reports: list
    models: list = field(default_factory=list, repr=False)
    norm_stats: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        """Summary-table row: fold-averaged confusion counts (rounded half
        to even) and the mean weighted F1."""
        counts = {k: np.mean([getattr(r.confusion, k) for r in self.reports]) for k in ("tn", "fp", "fn", "tp")}
        return {
            "classifier": DISPLAY_NAMES[self.kind],
            **{k: int(round(v)) for k, v in counts.items()},
            "weighted_f1": float(np.mean([r.f1_weighted for r in self.reports])),
        }


def cross_validate(spec: ModelSpec, ds: Dataset, plan: FoldPlan, seed: int = 0, jobs: int = 1) -> CrossValResult:
    if len(plan.assignments) != len(ds):
        raise ValueError("fold plan does not cover the dataset")
    args = [(spec, ds, plan, f, seed) for f in range(plan.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_run_fold_star, args))
    else:
        out = [run_fold(*a) for a in args]
    return CrossValResult(spec.kind, [o[0] for o in out], [o[1] for o in out], [o[2] for o in out])


def with_space(spec: ModelSpec, **changes) -> ModelSpec:
    return replace(spec, space=replace(spec.space, **changes))
