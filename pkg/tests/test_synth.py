import math
import warnings

import numpy as np
import pytest
from scipy.stats import ttest_ind

from gridfault.dataio import SCHEMA, apply_norm, class_weights, fit_norm, save_csv
from gridfault.linmod import coefficient_importance, fit_logistic
from gridfault.synth import (DEFAULT_MARGINALS, InfeasibleScenario, Mechanism, ScenarioConfig, fault_probability,
                             generate, generate_with_origin, ground_truth_drivers, planted_scenario, to_z)

RULE = Mechanism(("wind_gust", "flicker"), (2.0, 1.5), -3.0)


def test_rule_at_mean_is_sigmoid_minus_three():
    assert RULE.probability(np.zeros(12)) == pytest.approx(1 / (1 + math.exp(3)), abs=1e-15)
    assert round(float(RULE.probability(np.zeros(12))), 5) == 0.04743
    cfg = ScenarioConfig(10, 10, (RULE,), noise_sigma=1.0)
    mean = np.array([DEFAULT_MARGINALS[f][0] for f in SCHEMA.features])
    assert fault_probability(cfg, mean[None])[0] == pytest.approx(0.04743, abs=1e-5)


def test_noise_sigma_sharpens_and_zero_is_hard():
    z = np.zeros((3, 12))
    z[:, 0] = [1.4, 1.5, 1.6]  # score -0.2, 0, +0.2
    mean, sd = (np.array([DEFAULT_MARGINALS[f][i] for f in SCHEMA.features]) for i in (0, 1))
    X = mean + sd * z
    hard = fault_probability(ScenarioConfig(1, 1, (RULE,), noise_sigma=0.0), X)
    assert hard.tolist() == [0.0, 0.0, 1.0]
    soft = fault_probability(ScenarioConfig(1, 1, (RULE,), noise_sigma=0.1), X)
    assert soft[0] < 0.5 < soft[2] and soft[1] == pytest.approx(0.5)
    assert np.allclose(to_z(ScenarioConfig(1, 1, (RULE,)), X), z)


def test_no_faults_means_all_zero_labels():
    ds = generate(ScenarioConfig(50, 0, (RULE,), seed=1))
    assert len(ds) == 50 and ds.y.sum() == 0


@pytest.mark.parametrize("frac", [0.0, 0.25, 1.0])
def test_label_counts_exact(frac):
    ds, origin = generate_with_origin(planted_scenario(300, 40, seed=2, unexplained=frac))
    assert ds.class_counts == (300, 40)
    assert int((origin == 2).sum()) == round(frac * 40)


def test_marginals_respect_bounds():
    ds = generate(planted_scenario(2000, 100, seed=3))
    for j, f in enumerate(SCHEMA.features):
        _, _, lo, hi = DEFAULT_MARGINALS[f]
        assert ds.X[:, j].min() >= lo and ds.X[:, j].max() <= hi
    pf = ds.X[:, SCHEMA.index("min_power_factor")]
    assert pf.min() >= 0 and pf.max() <= 1


def test_fully_unexplained_faults_are_indistinguishable():
    ds = generate(planted_scenario(1500, 300, seed=4, unexplained=1.0))
    for j in range(12):
        assert ttest_ind(ds.X[ds.y == 1, j], ds.X[ds.y == 0, j]).pvalue > 0.01


def test_explained_faults_carry_the_drivers():
    ds = generate(planted_scenario(1500, 300, seed=4))
    for f in ("wind_gust", "flicker"):
        j = SCHEMA.index(f)
        assert ds.X[ds.y == 1, j].mean() > ds.X[ds.y == 0, j].mean()


def test_deterministic_bytes(tmp_path):
    cfg = planted_scenario(100, 20, seed=5, unexplained=0.2)
    save_csv(generate(cfg), tmp_path / "a.csv")
    save_csv(generate(cfg), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    other = planted_scenario(100, 20, seed=6, unexplained=0.2)
    save_csv(generate(other), tmp_path / "c.csv")
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_infeasible_rejection_reported():
    hopeless = Mechanism(("wind_gust",), (1.0,), -1000.0)
    with pytest.raises(InfeasibleScenario):
        generate(ScenarioConfig(10, 5, (hopeless,), noise_sigma=1.0))


def test_ground_truth_rankings():
    assert ground_truth_drivers(planted_scenario()) == [["wind_gust", "flicker"]]
    single = ScenarioConfig(1, 1, (Mechanism(("humidity",), (3.0,), 0.0),))
    assert ground_truth_drivers(single) == [["humidity"]]
    tie = ScenarioConfig(1, 1, (Mechanism(("flicker", "temperature"), (1.0, -1.0), 0.0),))
    assert ground_truth_drivers(tie) == [["temperature", "flicker"]]
    with pytest.raises(ValueError):
        ground_truth_drivers(ScenarioConfig(1, 0))


def test_hard_threshold_logistic_recovers_driver_ranking():
    ds = generate(planted_scenario(1000, 200, noise_sigma=0.0, seed=1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        norm = apply_norm(ds, fit_norm(ds))
    m = fit_logistic(norm, 1e-3, class_weights(norm))
    assert [f for f, _ in coefficient_importance(m)[:2]] == ground_truth_drivers(planted_scenario())[0]


def test_config_validation_and_json_round_trip(tmp_path):
    cfg = planted_scenario(12, 3, noise_sigma=0.2, seed=9, unexplained=1 / 3)
    (tmp_path / "s.json").write_text(cfg.to_json())
    assert ScenarioConfig.load(tmp_path / "s.json") == cfg
    with pytest.raises(ValueError):
        ScenarioConfig(1, 1, unexplained_fault_fraction=1.5)
    with pytest.raises(ValueError):
        ScenarioConfig(1, 1, noise_sigma=-1)
    with pytest.raises(ValueError):
        Mechanism(("wind_gust",), (float("nan"),), 0.0)
    with pytest.raises(ValueError):
        Mechanism(("gust",), (1.0,), 0.0)
