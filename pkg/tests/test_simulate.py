import math

import numpy as np
import pytest

from strata_id.oracle import forward_probabilities, ve_estimands
from strata_id.simulate import (
    TrialDataset,
    gen_params,
    household_mapping,
    neighbor_error_kernel,
    scenario_config,
    simulate_dataset,
    softmax,
    softmax_inv,
)
from strata_id.strata import TrialShape, arm_infection_mask


class TestLinks:
    def test_softmax_round_trip(self, rng):
        for _ in range(20):
            theta = rng.dirichlet(rng.uniform(0.5, 5.0, size=5))
            assert np.max(np.abs(softmax(softmax_inv(theta)) - theta)) < 1e-12

    def test_reference_coordinate_is_zero(self, rng):
        theta = rng.dirichlet([3, 2, 1])
        assert softmax_inv(theta)[-1] == 0.0


class TestScenarioConfigs:
    def test_two_arm_shape_and_settings(self):
        config = scenario_config("two_arm_severe", n=100, seed=0)
        assert config.shape == TrialShape(n_z=2, n_r=4, n_a=3, n_x=3)
        assert config.dirichlet_strata == (91.0, 5.0, 0.5, 3.5)
        assert config.misclass == (0.8, 0.99, 0.99, 0.9)

    def test_three_arm_shape_and_concentration(self):
        config = scenario_config("three_arm_severe", n=100, seed=0)
        assert config.shape == TrialShape(n_z=3, n_r=8, n_a=7, n_x=3)
        assert config.dirichlet_strata == (91.0, 5.0, 0.1, 0.1, 0.1, 0.1, 0.1, 3.5)
        gp = gen_params(config)
        assert gp.population.theta.shape == (8, 3, 8)

    def test_neighbor_kernels(self):
        k3 = neighbor_error_kernel(3, 0.75)
        assert np.allclose(k3[0], [0.75, 0.25, 0.0])
        assert np.allclose(k3[1], [0.125, 0.75, 0.125])
        k7 = neighbor_error_kernel(7, 0.5)
        assert np.allclose(k7[3], [0, 0, 0.25, 0.5, 0.25, 0, 0])
        assert np.allclose(k7[0], [0.5, 0.5, 0, 0, 0, 0, 0])
        assert np.allclose(k7.sum(axis=1), 1.0)

    def test_household_mapping_ties_outcome_test_to_infection_test(self):
        config = scenario_config("two_arm_transmission", n=50, seed=1)
        assert config.misclass == (0.8, 0.99, 0.8, 0.99)
        with pytest.raises(ValueError):
            household_mapping(scenario_config("three_arm_severe", n=10, seed=0))

    def test_transmission_effect_size(self):
        # risk difference on the doubly-infected stratum near the advertised 0.16
        config = scenario_config("two_arm_transmission", n=10, seed=0)
        diffs = []
        for seed in range(30):
            gp = gen_params(scenario_config("two_arm_transmission", n=10, seed=seed))
            ve = ve_estimands(gp.population)
            diffs.append(ve.ve_t_marg[3, 1, 0])
        assert 0.1 < np.mean(diffs) < 0.22

    def test_null_effect_zeroes_the_severity_contrast(self):
        config = scenario_config("two_arm_severe", n=10, seed=5, null_effect=True)
        gp = gen_params(config)
        ve = ve_estimands(gp.population)
        assert abs(ve.ve_i_marg[3, 1, 0]) < 1e-12
        config3 = scenario_config("three_arm_severe", n=10, seed=5, null_effect=True)
        ve3 = ve_estimands(gen_params(config3).population)
        assert abs(ve3.ve_i_marg[7, 2, 0]) < 1e-12

    def test_config_validation(self):
        with pytest.raises(ValueError):
            scenario_config("two_arm_severe", n=0, seed=1)
        with pytest.raises(ValueError):
            scenario_config("no_such_scenario", n=10, seed=1)


class TestGenParams:
    def test_vaccinated_arm_incidence_matches_dirichlet_mean(self, rng):
        # mean mass on strata infected under arm 2; the protocol advertises
        # this as roughly five percent, the concentration itself gives 0.04
        draws = rng.dirichlet([91.0, 5.0, 0.5, 3.5], size=100_000)
        mass = draws[:, 2] + draws[:, 3]
        se = mass.std() / math.sqrt(len(mass))
        assert abs(mass.mean() - 0.04) < 4 * se
        assert abs(mass.mean() - 0.05) < 0.015

        sampled = []
        for seed in range(200):
            gp = gen_params(scenario_config("two_arm_severe", n=10, seed=seed))
            theta_ref = gp.population.theta[:, 0, :]
            sampled.append((theta_ref[:, 2] + theta_ref[:, 3]).mean())
        assert abs(np.mean(sampled) - 0.04) < 4 * np.std(sampled) / math.sqrt(200)

    def test_regression_form_reproduces_population(self):
        config = scenario_config("two_arm_severe", n=10, seed=9)
        gp = gen_params(config)
        theta_rebuilt = np.stack(
            [
                [softmax(gp.mu[r] + gp.eta[x]) for x in range(3)]
                for r in range(4)
            ]
        )
        assert np.max(np.abs(theta_rebuilt - gp.population.theta)) < 1e-12
        assert np.all(gp.eta[0] == 0.0)
        assert np.all(gp.gamma[0] == 0.0)

    def test_deterministic(self):
        config = scenario_config("two_arm_severe", n=10, seed=11)
        p1 = gen_params(config).population
        p2 = gen_params(config).population
        assert np.array_equal(p1.theta, p2.theta)
        assert np.array_equal(p1.a, p2.a)


class TestSimulateDataset:
    def test_error_free_measurement_is_identity(self, rng):
        config = scenario_config("two_arm_severe", n=4000, seed=2, oracle_fields=True)
        gp = gen_params(config)
        exact = gp.population
        noiseless = type(exact)(
            theta=exact.theta, a=exact.a, beta=exact.beta,
            sn_s=1.0, sp_s=1.0, sn_y=1.0, sp_y=1.0,
        )
        ds = simulate_dataset(noiseless, config)
        mask = arm_infection_mask(2)
        infected = mask[ds.z - 1, ds.stratum].astype(bool)
        assert np.array_equal(ds.s_obs.astype(bool), infected)
        assert np.array_equal(ds.y_obs, np.where(ds.y_true == 1, 1, 0))
        assert np.array_equal(ds.a_obs, ds.a_true)

    def test_reproducible_bytes(self):
        config = scenario_config("two_arm_severe", n=3000, seed=4, oracle_fields=True)
        gp = gen_params(config)
        csv1 = simulate_dataset(gp.population, config).to_csv()
        csv2 = simulate_dataset(gp.population, config).to_csv()
        assert csv1 == csv2

    def test_empirical_cells_match_forward_map(self):
        config = scenario_config("two_arm_severe", n=200_000, seed=8)
        gp = gen_params(config)
        ds = simulate_dataset(gp.population, config)
        counts = ds.cell_counts(config.shape).sum(axis=5)
        n_zr = counts.sum(axis=(0, 1, 2))
        cells = forward_probabilities(gp.population)
        emp = counts / n_zr
        se = np.sqrt(cells.q * (1.0 - cells.q) / n_zr)
        dev = np.abs(emp - cells.q) / np.where(se > 0, se, 1.0)
        assert dev.max() < 4.0

    def test_covariate_misreading_kernel(self):
        config = scenario_config(
            "three_arm_severe", n=150_000, seed=6,
            measure_a_with_error=True, oracle_fields=True,
        )
        gp = gen_params(config)
        ds = simulate_dataset(gp.population, config)
        # empirical kernel row for an interior level
        for a_true in (3, 4):
            rows = ds.a_true == a_true
            n = rows.sum()
            assert n > 1000
            emp_same = np.mean(ds.a_obs[rows] == a_true)
            assert abs(emp_same - 0.5) < 4 * math.sqrt(0.25 / n)
            emp_up = np.mean(ds.a_obs[rows] == a_true + 1)
            assert abs(emp_up - 0.25) < 4 * math.sqrt(0.25 * 0.75 / n)

    def test_misreading_conditionally_independent_of_status(self):
        config = scenario_config(
            "two_arm_severe", n=150_000, seed=13,
            measure_a_with_error=True, oracle_fields=True,
        )
        gp = gen_params(config)
        ds = simulate_dataset(gp.population, config)
        for a_true in (1, 2, 3):
            sub = ds.a_true == a_true
            for s in (0, 1):
                rows = sub & (ds.s_obs == s)
                n = rows.sum()
                if n < 500:
                    continue
                p_all = np.mean(ds.a_obs[sub] == a_true)
                p_s = np.mean(ds.a_obs[rows] == a_true)
                se = math.sqrt(p_all * (1 - p_all) / n)
                assert abs(p_s - p_all) < 4 * se

    def test_arm_balance(self):
        config = scenario_config("two_arm_severe", n=20_000, seed=3)
        gp = gen_params(config)
        ds = simulate_dataset(gp.population, config)
        n1 = np.sum(ds.z == 1)
        assert abs(n1 - 10_000) < 5 * math.sqrt(20_000 * 0.25)

    def test_sites_filled_in_blocks(self):
        config = scenario_config("two_arm_severe", n=10, seed=3)
        gp = gen_params(config)
        ds = simulate_dataset(gp.population, config)
        assert list(ds.r) == [1, 1, 1, 2, 2, 2, 3, 3, 4, 4]

    def test_csv_round_trip(self):
        config = scenario_config("two_arm_severe", n=500, seed=5, oracle_fields=True)
        gp = gen_params(config)
        ds = simulate_dataset(gp.population, config)
        back = TrialDataset.from_csv(ds.to_csv())
        assert np.array_equal(back.z, ds.z)
        assert np.array_equal(back.y_obs, ds.y_obs)
        assert np.array_equal(back.stratum, ds.stratum)

    def test_cell_counts_total(self):
        config = scenario_config("two_arm_severe", n=777, seed=5)
        gp = gen_params(config)
        ds = simulate_dataset(gp.population, config)
        assert ds.cell_counts(config.shape).sum() == 777

    def test_undefined_outcomes_marked(self):
        config = scenario_config("two_arm_severe", n=5000, seed=5, oracle_fields=True)
        gp = gen_params(config)
        ds = simulate_dataset(gp.population, config)
        mask = arm_infection_mask(2)
        infected = mask[ds.z - 1, ds.stratum].astype(bool)
        assert np.all(ds.y_true[~infected] == -1)
        assert np.all(ds.y_true[infected] >= 0)
