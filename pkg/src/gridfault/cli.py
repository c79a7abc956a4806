"""Command-line entry point: generate, train, crossval, attribute.

Every command writes JSON. Each output carries the id of the run manifest
that produced it; the manifest itself (with wall-clock time) is written next
to the output as ``<output>.manifest.json``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from datetime import datetime, timezone

import numpy as np

from . import __version__
from ._util import DataError, NumericError, content_id, derive_seed
from .attrib import BASELINE_KINDS, attribution_report, integrated_gradients, make_baseline, select_m
from .dataio import NormStats, apply_norm, fit_norm, load_csv, save_csv, stratified_kfold
from .evalkit import MODEL_KINDS, CrossValResult, ModelSpec, SearchSpace, cross_validate, evaluate, select_and_fit
from .kernsvm import KernelModel
from .linmod import LinearModel
from .mlp import MlpModel
from .synth import ScenarioConfig, generate

logger = logging.getLogger("gridfault")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
M_GRID = (25, 50, 100, 200)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error({"error": "usage", "message": message})
        sys.exit(EXIT_USAGE)


def _emit_error(record):
    sys.stderr.write(json.dumps(record) + "\n")


# ------------------------------------------------------------------ manifest / io

def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# flags that cannot change any output value stay out of the manifest
_NON_SEMANTIC = {"func", "jobs", "verbose"}


def _manifest(command, args, inputs, outputs):
    body = {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in _NON_SEMANTIC},
        "inputs": {os.path.basename(p): _file_digest(p) for p in inputs},
        "outputs": [os.path.basename(p) for p in outputs],
        "version": __version__,
    }
    return content_id(body), body


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
        fh.write("\n")


def _finish(manifest_id, body, outputs):
    stamped = {"manifest_id": manifest_id, **body,
               "created": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")}
    for out in outputs:
        _write_json(out + ".manifest.json", stamped)


def _load_space(path):
    if path is None:
        return SearchSpace(), {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    extra = {k: cfg.pop(k) for k in ("budget", "fixed") if k in cfg}
    return SearchSpace.from_dict(cfg), extra


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)


def load_model_bundle(path):
    _require(path)
    with open(path, encoding="utf-8") as fh:
        bundle = json.load(fh)
    kind = bundle.get("kind")
    stats = NormStats.from_dict(bundle["norm_stats"])
    if kind == "mlp":
        model = MlpModel.from_dict(bundle["model"])
    elif kind in ("ridge", "logistic", "linear_svm"):
        model = LinearModel.from_dict(bundle["model"])
    elif kind == "rbf_svm":
        model = KernelModel.from_dict(bundle["model"])
    else:
        raise UsageError(f"unknown model kind {kind!r} in {path}")
    return kind, model, stats, bundle


# ------------------------------------------------------------------ commands

def cmd_generate(args):
    _require(args.scenario)
    config = ScenarioConfig.load(args.scenario)
    if args.seed is not None:
        config = ScenarioConfig.from_dict({**config.to_dict(), "seed": args.seed})
    ds = generate(config)
    save_csv(ds, args.out)
    manifest_id, body = _manifest("generate", args, [args.scenario], [args.out])
    _finish(manifest_id, body, [args.out])
    logger.info("wrote %d samples (%d faults) to %s", len(ds), ds.class_counts[1], args.out)
    return EXIT_OK


def cmd_train(args):
    _require(args.data)
    space, extra = _load_space(args.search)
    ds = load_csv(args.data)
    stats = fit_norm(ds)
    norm = apply_norm(ds, stats)
    spec = ModelSpec(args.model, space, budget=extra.get("budget", args.budget), fixed=extra.get("fixed"))
    model, hp, search = select_and_fit(spec, norm, args.seed, stats.id)
    manifest_id, body = _manifest("train", args, [args.data] + ([args.search] if args.search else []),
                                  [args.out_model, args.out_eval])
    _write_json(args.out_model, {"manifest_id": manifest_id, "kind": args.model, "hyperparams": hp,
                                 "norm_stats": stats.to_dict(), "model": model.to_dict()})
    evaluation = {"manifest_id": manifest_id, "kind": args.model, "hyperparams": hp,
                  "validation": None if search is None else search.report.to_dict(),
                  "trials": [] if search is None else [{"hyperparams": h, "weighted_f1": r.f1_weighted}
                                                       for h, r in search.trials],
                  "training": evaluate(model, norm, args.model, hp).to_dict()}
    _write_json(args.out_eval, evaluation)
    _finish(manifest_id, body, [args.out_model, args.out_eval])
    return EXIT_OK


def cmd_crossval(args):
    _require(args.data)
    kinds = [k.strip() for k in args.models.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in MODEL_KINDS]
    if unknown or not kinds:
        raise UsageError(f"unknown model kind(s) {unknown}; choose from {MODEL_KINDS}")
    space, extra = _load_space(args.search)
    ds = load_csv(args.data)
    plan = stratified_kfold(ds, args.k, args.seed)
    results: list[CrossValResult] = []
    for i, kind in enumerate(kinds):
        spec = ModelSpec(kind, space, budget=extra.get("budget", args.budget))
        results.append(cross_validate(spec, ds, plan, derive_seed(args.seed, i), jobs=args.jobs))
    folds_out = args.out[:-5] + ".folds.json" if args.out.endswith(".json") else args.out + ".folds.json"
    manifest_id, body = _manifest("crossval", args, [args.data] + ([args.search] if args.search else []),
                                  [args.out, folds_out])
    _write_json(args.out, {"manifest_id": manifest_id, "k": args.k, "rows": [r.summary() for r in results]})
    _write_json(folds_out, {"manifest_id": manifest_id,
                            "folds": [rep.to_dict() for r in results for rep in r.reports]})
    _finish(manifest_id, body, [args.out, folds_out])
    return EXIT_OK


def parse_selector(text):
    if text in ("all-tp", "all-fn"):
        return text, None
    if text.startswith("top-confidence:"):
        n = int(text.split(":", 1)[1])
        if n < 1:
            raise ValueError
        return "top-confidence", n
    if text.startswith("id:"):
        return "id", [int(v) for v in text[3:].split(",") if v]
    raise ValueError


def select_samples(selector, ds, proba):
    """Row positions in ``ds`` picked by a selector, in report order."""
    kind, arg = selector
    pred = (proba > 0.5).astype(int)
    if kind == "all-tp":
        return list(np.flatnonzero((ds.y == 1) & (pred == 1)))
    if kind == "all-fn":
        return list(np.flatnonzero((ds.y == 1) & (pred == 0)))
    if kind == "top-confidence":
        tp = np.flatnonzero((ds.y == 1) & (pred == 1))
        order = sorted(tp, key=lambda i: (-proba[i], ds.ids[i]))
        return order[:arg]
    pos = {int(sid): i for i, sid in enumerate(ds.ids)}
    missing = [s for s in arg if s not in pos]
    if missing:
        raise DataError(f"sample ids not found: {missing}")
    return [pos[s] for s in arg]


def cmd_attribute(args):
    try:
        selector = parse_selector(args.select)
    except ValueError:
        raise UsageError(f"bad sample selector {args.select!r}") from None
    if args.m != "auto":
        try:
            m_fixed = int(args.m)
        except ValueError:
            raise UsageError("--m must be a positive integer or 'auto'") from None
        if m_fixed < 1:
            raise UsageError("--m must be a positive integer or 'auto'")
    kind, model, stats, bundle = load_model_bundle(args.model)
    if not getattr(model, "supports_input_gradient", False):
        raise UsageError(f"model kind {kind!r} does not support gradient attribution")
    _require(args.data)
    ds = load_csv(args.data)
    norm = apply_norm(ds, stats)
    train_path = args.train_data or args.data
    _require(train_path)
    train_norm = norm if train_path == args.data else apply_norm(load_csv(train_path), stats)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        baseline = make_baseline(args.baseline, train_norm, model, seed=args.seed)
        proba = model.predict_proba(norm.X)
        rows = select_samples(selector, norm, proba)
        if args.m == "auto":
            m = select_m(model, [norm.X[i] for i in rows], baseline, 1, args.tol, M_GRID) if rows else M_GRID[0]
        else:
            m = m_fixed
        reports = []
        for i in rows:
            res = integrated_gradients(model, norm.X[i], baseline, 1, m, sample_id=int(norm.ids[i]))
            rep = attribution_report(res, ds.schema, x_raw=ds.X[i], baseline_raw=stats.invert(baseline.x_prime))
            rep["confidence"] = float(proba[i])
            reports.append(rep)
    inputs = [args.model, args.data] + ([args.train_data] if args.train_data else [])
    manifest_id, body = _manifest("attribute", args, inputs, [args.out])
    _write_json(args.out, {
        "manifest_id": manifest_id, "model_kind": kind, "selector": args.select, "m": m,
        "m_auto": args.m == "auto", "tol": args.tol,
        "baseline_probs": None if baseline.probs is None else list(baseline.probs),
        "warnings": [str(w.message) for w in caught],
        "reports": reports,
    })
    _finish(manifest_id, body, [args.out])
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="gridfault", description="Power-grid fault classification and attribution.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset from a scenario JSON")
    g.add_argument("scenario")
    g.add_argument("out")
    g.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
    g.set_defaults(func=cmd_generate)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--jobs", type=int, default=1)

    t = sub.add_parser("train", help="select hyperparameters and fit one model")
    t.add_argument("data")
    t.add_argument("--model", required=True, choices=MODEL_KINDS)
    t.add_argument("--search", help="search-space JSON (SearchSpace fields, optional budget/fixed)")
    t.add_argument("--budget", type=int, default=200, help="MLP random-search trials")
    t.add_argument("--out-model", required=True)
    t.add_argument("--out-eval", required=True)
    common(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("crossval", help="stratified k-fold evaluation of several model kinds")
    c.add_argument("data")
    c.add_argument("--models", default=",".join(MODEL_KINDS))
    c.add_argument("--k", type=int, default=5)
    c.add_argument("--search")
    c.add_argument("--budget", type=int, default=200)
    c.add_argument("--out", required=True)
    common(c)
    c.set_defaults(func=cmd_crossval)

    a = sub.add_parser("attribute", help="Integrated Gradients reports for selected samples")
    a.add_argument("model")
    a.add_argument("data")
    a.add_argument("--select", default="top-confidence:5",
                   help="all-tp | all-fn | top-confidence:N | id:<i,j,...>")
    a.add_argument("--baseline", choices=BASELINE_KINDS, default="mean")
    a.add_argument("--m", default="100", help="step count or 'auto'")
    a.add_argument("--tol", type=float, default=1e-2)
    a.add_argument("--train-data", help="data for the baseline (defaults to DATA)")
    a.add_argument("--out", required=True)
    common(a)
    a.set_defaults(func=cmd_attribute)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors, --help, --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _emit_error({"error": "not_found", "path": exc.filename or str(exc.args[0])})
        return EXIT_DATA
    except UsageError as exc:
        _emit_error({"error": "usage", "message": str(exc)})
        return EXIT_USAGE
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as exc:
        _emit_error({"error": "numeric_failure", "message": str(exc)})
        return EXIT_NUMERIC
    except (DataError, ValueError, KeyError, json.JSONDecodeError) as exc:
        _emit_error({"error": "data_error", "message": str(exc)})
        return EXIT_DATA


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
