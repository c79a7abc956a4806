"""Small numeric and seeding helpers shared across modules."""

from __future__ import annotations

import hashlib
import json

import numpy as np


class DataError(ValueError):
    """Input data is malformed or violates a precondition."""


class NumericError(ArithmeticError):
    """A numerical routine failed (singular system, non-finite values)."""


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed from a root seed and integer keys."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_id(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]
