"""Seeded synthetic fault data with planted causal mechanisms.

Every feature has a truncated-normal marginal in physical units. A
mechanism scores a sample on the z-scored values of its driver features,
``s = c . z + bias``. Labels follow a latent logistic model whose noise scale
is ``noise_sigma``::

    p(fault | x) = 1 - prod_k (1 - sigmoid(s_k / noise_sigma))

With ``noise_sigma = 1`` and one mechanism this is exactly
``sigmoid(c . z + bias)``; smaller values sharpen the class boundary and
``noise_sigma = 0`` makes it deterministic (fault iff some ``s_k > 0``).
Fault and non-fault features are drawn by rejection against ``p`` and
``1 - p``. A share ``unexplained_fault_fraction`` of the faults is drawn
from the non-fault distribution instead, modelling faults that leave no
trace in the features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from ._util import DataError, sigmoid
from .dataio import SCHEMA, Dataset

# (mean, sd, lower, upper) in the units of the schema
DEFAULT_MARGINALS = {
    "wind_gust": (9.0, 4.0, 0.0, 40.0),
    "wind_dir": (180.0, 90.0, 0.0, 360.0),
    "temperature": (-2.0, 6.0, -35.0, 25.0),
    "pressure": (1005.0, 12.0, 950.0, 1050.0),
    "humidity": (80.0, 10.0, 20.0, 100.0),
    "precipitation": (0.3, 0.6, 0.0, 15.0),
    "d_frequency": (0.0, 0.02, -0.5, 0.5),
    "d_voltage_imbalance": (0.0, 0.1, -2.0, 2.0),
    "d_active_power": (0.0, 150.0, -2000.0, 2000.0),
    "min_power_factor": (0.9, 0.05, 0.0, 1.0),
    "d_reactive_power": (0.0, 80.0, -1000.0, 1000.0),
    "flicker": (0.5, 0.2, 0.0, 5.0),
}

MIN_ACCEPTANCE = 1e-4
START = np.datetime64("2021-02-19T00:00:00", "s")


class InfeasibleScenario(DataError):
    pass


@dataclass(frozen=True)
class Mechanism:
    drivers: tuple[str, ...]
    coefficients: tuple[float, ...]
    bias: float

    def __post_init__(self):
        object.__setattr__(self, "drivers", tuple(self.drivers))
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        if len(self.drivers) != len(self.coefficients) or not self.drivers:
            raise ValueError("one coefficient per driver, at least one driver")
        if not np.all(np.isfinite(self.coefficients + (self.bias,))):
            raise ValueError("mechanism coefficients must be finite")
        unknown = set(self.drivers) - set(SCHEMA.features)
        if unknown:
            raise ValueError(f"unknown driver features {sorted(unknown)}")

    def score(self, Z):
        """Logit ``c . z + bias`` for rows of z-scored features."""
        idx = [SCHEMA.index(d) for d in self.drivers]
        return np.asarray(Z)[..., idx] @ np.asarray(self.coefficients) + self.bias

    def probability(self, Z):
        return sigmoid(self.score(Z))

    def to_dict(self):
        return {"drivers": list(self.drivers), "coefficients": list(self.coefficients), "bias": self.bias}


@dataclass(frozen=True)
class ScenarioConfig:
    n_nonfault: int
    n_fault: int
    mechanisms: tuple[Mechanism, ...] = ()
    noise_sigma: float = 1.0
    seed: int = 0
    unexplained_fault_fraction: float = 0.0
    marginals: dict = field(default_factory=lambda: dict(DEFAULT_MARGINALS))

    def __post_init__(self):
        object.__setattr__(self, "mechanisms", tuple(self.mechanisms))
        if self.n_nonfault < 0 or self.n_fault < 0:
            raise ValueError("sample counts must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.unexplained_fault_fraction <= 1.0:
            raise ValueError("unexplained_fault_fraction must be in [0, 1]")
        if set(self.marginals) != set(SCHEMA.features):
            raise ValueError("marginals must cover every schema feature")

    def to_dict(self):
        return {
            "n_nonfault": self.n_nonfault, "n_fault": self.n_fault,
            "mechanisms": [m.to_dict() for m in self.mechanisms],
            "noise_sigma": self.noise_sigma, "seed": self.seed,
            "unexplained_fault_fraction": self.unexplained_fault_fraction,
            "marginals": {k: list(self.marginals[k]) for k in SCHEMA.features},
        }

    @classmethod
    def from_dict(cls, d):
        marg = d.get("marginals")
        return cls(
            n_nonfault=int(d["n_nonfault"]), n_fault=int(d["n_fault"]),
            mechanisms=tuple(Mechanism(tuple(m["drivers"]), tuple(m["coefficients"]), float(m["bias"]))
                             for m in d.get("mechanisms", ())),
            noise_sigma=float(d.get("noise_sigma", 1.0)), seed=int(d.get("seed", 0)),
            unexplained_fault_fraction=float(d.get("unexplained_fault_fraction", 0.0)),
            marginals={k: tuple(v) for k, v in marg.items()} if marg else dict(DEFAULT_MARGINALS),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def planted_scenario(n_nonfault=1600, n_fault=200, noise_sigma=0.1, seed=0, unexplained=0.0) -> ScenarioConfig:
    """Wind-gust and flicker driven faults: sigmoid(2 gust_z + 1.5 flicker_z - 3)."""
    rule = Mechanism(("wind_gust", "flicker"), (2.0, 1.5), -3.0)
    return ScenarioConfig(n_nonfault, n_fault, (rule,), noise_sigma, seed, unexplained)


def _params(config):
    return np.array([config.marginals[f] for f in SCHEMA.features], dtype=float).T


def to_z(config: ScenarioConfig, X):
    mean, sd, _, _ = _params(config)
    return (np.asarray(X, dtype=float) - mean) / sd


def fault_probability(config: ScenarioConfig, X):
    """p(fault | x) under the planted mechanisms at the configured noise."""
    Z = to_z(config, X)
    if not config.mechanisms:
        return np.zeros(len(Z))
    survive = np.ones(len(Z))
    for mech in config.mechanisms:
        s = mech.score(Z)
        if config.noise_sigma == 0:
            p = (s > 0).astype(float)
        else:
            p = sigmoid(s / config.noise_sigma)
        survive *= 1.0 - p
    return 1.0 - survive


def _draw_marginals(config, n, rng):
    mean, sd, lo, hi = _params(config)
    a, b = (lo - mean) / sd, (hi - mean) / sd
    Z = truncnorm.rvs(a, b, size=(n, len(mean)), random_state=rng)
    return mean + sd * Z


def _rejection(config, n, rng, accept_fn, what):
    if n == 0:
        return np.empty((0, len(SCHEMA))), 0.0
    out = []
    got = 0
    drawn = accepted = 0
    while got < n:
        batch = max(2000, 4 * (n - got))
        X = _draw_marginals(config, batch, rng)
        keep = rng.random(batch) < accept_fn(X)
        drawn += batch
        accepted += int(keep.sum())
        if drawn >= 100_000 and accepted / drawn < MIN_ACCEPTANCE:
            raise InfeasibleScenario(f"{what} acceptance rate {accepted / drawn:.2e} below {MIN_ACCEPTANCE:g}")
        out.append(X[keep])
        got += int(keep.sum())
    return np.concatenate(out)[:n], accepted / drawn


def generate_with_origin(config: ScenarioConfig):
    """Dataset plus a per-sample origin tag: 0 non-fault, 1 explained fault,
    2 unexplained fault."""
    rng = np.random.default_rng(config.seed)
    n_unexp = int(round(config.unexplained_fault_fraction * config.n_fault))
    n_expl = config.n_fault - n_unexp
    if n_expl and not config.mechanisms:
        raise InfeasibleScenario("explained faults requested without any mechanism")
    non, _ = _rejection(config, config.n_nonfault + n_unexp, rng,
                        lambda X: 1.0 - fault_probability(config, X), "non-fault")
    flt, _ = _rejection(config, n_expl, rng, lambda X: fault_probability(config, X), "fault")
    X = np.vstack([non[:config.n_nonfault], flt, non[config.n_nonfault:]])
    origin = np.concatenate([np.zeros(config.n_nonfault, int), np.ones(n_expl, int), np.full(n_unexp, 2)])
    order = rng.permutation(len(X))
    X, origin = X[order], origin[order]
    y = (origin > 0).astype(int)
    stamps = START + np.arange(len(X)) * np.timedelta64(60, "m")
    return Dataset(X, y, stamps), origin


def generate(config: ScenarioConfig) -> Dataset:
    return generate_with_origin(config)[0]


def ground_truth_drivers(config: ScenarioConfig):
    """Per mechanism, its driver features ranked by |coefficient| (ties in
    schema order)."""
    if not config.mechanisms:
        raise ValueError("scenario has no mechanisms")
    ranked = []
    for mech in config.mechanisms:
        pairs = sorted(zip(mech.drivers, mech.coefficients), key=lambda dc: (-abs(dc[1]), SCHEMA.index(dc[0])))
        ranked.append([d for d, _ in pairs])
    return ranked
