import numpy as np
import pytest
from scipy import stats

from conftest import small_datasets
from core.grid_model import IslandedGrid, apply_topology
from core.scenario_gen import (AT_MOST_ONE, EXACTLY_ONE, EXACTLY_TWO, GENERATOR_VERSION, OOD, SPLIT_RULES, TEST,
                               TRAIN, VAL, RetriesExhausted, ScenarioConfig, generate_dataset,
                               overlay_disconnections, sample_injection, sample_reference_topology, sample_rng,
                               split_config)


def test_split_rules_and_seeds():
    base = ScenarioConfig(seed=3)
    assert split_config(base, TRAIN).disconnection_rule == AT_MOST_ONE
    assert split_config(base, VAL).disconnection_rule == AT_MOST_ONE
    assert split_config(base, TEST).disconnection_rule == EXACTLY_ONE
    assert split_config(base, OOD).disconnection_rule == EXACTLY_TWO
    seeds = {split: split_config(base, split).seed for split in SPLIT_RULES}
    assert seeds == {TRAIN: 30, VAL: 31, TEST: 32, OOD: 33}


def test_disconnection_counts_follow_split_rules(ieee14_datasets):
    counts = {split: [s.tau.n_disconnected for s in ds.samples] for split, ds in ieee14_datasets.items()}
    assert set(counts[TRAIN]) <= {0, 1}
    assert set(counts[VAL]) <= {0, 1}
    assert set(counts[TEST]) == {1}
    assert set(counts[OOD]) == {2}


def test_every_sample_is_connected_and_balanced(ieee14, ieee14_datasets):
    for dataset in ieee14_datasets.values():
        for sample in dataset.samples:
            apply_topology(ieee14, sample.tau)
            assert sample.inj.total_production == pytest.approx(sample.inj.total_load, abs=1e-12)


def test_ground_truth_is_consistent(ieee14, ieee14_datasets):
    b = ieee14.susceptances
    for sample in ieee14_datasets[TEST].samples:
        status = sample.tau.line_status
        expected = np.where(status, b * (sample.theta_line[:, 0] - sample.theta_line[:, 1]), 0.0)
        np.testing.assert_allclose(sample.p_or, expected, atol=1e-12)
        np.testing.assert_allclose(sample.p_or + sample.p_ex, 0.0, atol=1e-12)
        assert sample.theta_bus[sample.slack_slot] == 0.0
        assert np.all(sample.theta_bus[~sample.bus_mask] == 0.0)


def test_generation_is_deterministic(ieee14):
    config = split_config(ScenarioConfig(seed=5), TEST, n_samples=6)
    first = generate_dataset(ieee14, TEST, config).to_arrays()
    second = generate_dataset(ieee14, TEST, config).to_arrays()
    for name in first:
        np.testing.assert_array_equal(first[name], second[name])


def test_worker_pool_preserves_sample_order(ieee14):
    config = split_config(ScenarioConfig(seed=7), OOD, n_samples=7)
    serial = generate_dataset(ieee14, OOD, config).to_arrays()
    pooled = generate_dataset(ieee14, OOD, config, workers=2).to_arrays()
    for name in serial:
        np.testing.assert_array_equal(serial[name], pooled[name])


def test_manifest_records_protocol(ieee14_datasets):
    manifest = ieee14_datasets[OOD].manifest
    assert manifest["split"] == OOD
    assert manifest["config"]["disconnection_rule"] == EXACTLY_TWO
    assert manifest["generator_version"] == GENERATOR_VERSION
    assert manifest["n_samples"] == len(ieee14_datasets[OOD])


def test_split_rule_mismatch_is_rejected(ieee14):
    with pytest.raises(ValueError):
        generate_dataset(ieee14, OOD, ScenarioConfig(n_samples=2, disconnection_rule=EXACTLY_ONE))


def test_bridge_only_grid_exhausts_retries(path_grid):
    rng = sample_rng(0, 0)
    with pytest.raises(RetriesExhausted):
        overlay_disconnections(path_grid, path_grid.default_topology(), rng, EXACTLY_ONE)


def test_reference_topology_unchanged_when_forced(ieee14):
    config = ScenarioConfig(p_unchanged=1.0)
    tau = sample_reference_topology(ieee14, sample_rng(0, 1), config)
    assert tau.is_default()


def test_reference_topology_splits_when_forced(ieee14):
    config = ScenarioConfig(p_unchanged=0.0)
    split = [not sample_reference_topology(ieee14, sample_rng(0, i), config).is_default() for i in range(20)]
    assert any(split)


def test_default_share_matches_p_unchanged(ieee14):
    rng = np.random.default_rng(11)
    config = ScenarioConfig(p_unchanged=0.3)
    defaults = sum(sample_reference_topology(ieee14, rng, config).is_default() for _ in range(10_000))
    assert abs(defaults / 10_000 - 0.3) <= 0.02


def test_exactly_one_is_uniform_over_survivable_lines(ieee14):
    default = ieee14.default_topology()
    survivable = []
    for line in range(ieee14.n_lines):
        try:
            apply_topology(ieee14, default.with_disconnected([line]))
            survivable.append(line)
        except IslandedGrid:
            pass
    rng = np.random.default_rng(12)
    counts = np.zeros(ieee14.n_lines, dtype=int)
    for _ in range(10_000):
        tau = overlay_disconnections(ieee14, default, rng, EXACTLY_ONE)
        counts[~tau.line_status] += 1
    assert counts.sum() == 10_000
    assert np.all(counts[np.setdiff1d(np.arange(ieee14.n_lines), survivable)] == 0)
    assert stats.chisquare(counts[survivable]).pvalue > 0.01


def test_at_most_one_disconnects_half_the_time(ieee14):
    default = ieee14.default_topology()
    rng = np.random.default_rng(13)
    outages = [overlay_disconnections(ieee14, default, rng, AT_MOST_ONE).n_disconnected for _ in range(10_000)]
    assert set(outages) <= {0, 1}
    assert abs(np.mean(outages) - 0.5) <= 0.02


def test_load_mean_stays_at_nominal(ieee14):
    rng = np.random.default_rng(14)
    config = ScenarioConfig()
    loads = np.array([sample_injection(ieee14, rng, config).p_load for _ in range(10_000)])
    np.testing.assert_allclose(loads.mean(axis=0), ieee14.nominal_load, rtol=0.01)


def test_load_scaling_stays_in_range(ieee14):
    config = ScenarioConfig(load_scale_range=(0.9, 1.1))
    for i in range(20):
        inj = sample_injection(ieee14, sample_rng(1, i), config)
        ratio = inj.p_load / ieee14.nominal_load
        assert np.all((ratio >= 0.9) & (ratio <= 1.1))
        assert np.all(inj.p_prod >= 0.0)


def test_invalid_scenario_config():
    with pytest.raises(ValueError):
        ScenarioConfig(p_unchanged=1.5)
    with pytest.raises(ValueError):
        ScenarioConfig(load_scale_range=(1.2, 0.8))
    with pytest.raises(ValueError):
        ScenarioConfig(disconnection_rule="Sometimes")


def test_subset_keeps_prefix(ieee14_datasets):
    subset = ieee14_datasets[TRAIN].subset(5)
    assert len(subset) == 5
    assert subset.manifest["n_samples"] == 5
    assert subset.samples[0] is ieee14_datasets[TRAIN].samples[0]


@pytest.mark.slow
def test_desk_scale_protocol(ieee14):
    datasets = small_datasets(ieee14, {TRAIN: 10_000, TEST: 1_000, OOD: 1_000})
    assert max(s.tau.n_disconnected for s in datasets[TRAIN].samples) <= 1
    assert all(s.tau.n_disconnected == 1 for s in datasets[TEST].samples)
    assert all(s.tau.n_disconnected == 2 for s in datasets[OOD].samples)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
