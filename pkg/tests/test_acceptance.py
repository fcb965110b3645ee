"""Acceptance suite: every criterion at its stated tolerance.

Each test prints one PASS line when it completes; a failed assertion surfaces
as the usual pytest failure for that criterion.  The desk-scale power
criteria are marked slow (they simulate and fit dozens of trials) but run by
default; see the README for timing notes.
"""

import itertools
import json
import time

import numpy as np
import pytest

from strata_id.design import build_S_matrix, build_Stilde_matrix
from strata_id.inference import McmcOptions, log_likelihood
from strata_id.linalg import kruskal_rank, numerical_rank
from strata_id.oracle import (
    forward_probabilities,
    identification_region,
    identify_from_population,
    p_tilde_from_params,
    two_arm_observables,
    two_arm_sensitivity,
    ve_estimands,
)
from strata_id.power import power_study
from strata_id.simulate import gen_params, scenario_config, simulate_dataset

from conftest import draw_theorem2_design, random_beta
from test_design import in_family_match
from test_inference import brute_force_log_likelihood, tiny_params
from test_oracle import random_two_arm_truth


def report(name, detail=""):
    print(f"\nPASS {name}" + (f": {detail}" if detail else ""))


def test_criterion_1_structural_lemmas():
    start = time.time()
    for n_z in (2, 3, 4):
        m = build_S_matrix(n_z)
        assert kruskal_rank(m) == 3
        assert numerical_rank(m) == n_z + 1
    elapsed = time.time() - start
    assert elapsed < 1.0
    report("criterion 1 (structural lemmas)", f"{elapsed:.2f}s")


def test_criterion_2_noisy_structural_lemmas():
    start = time.time()
    rng = np.random.default_rng(202)
    for trial in range(200):
        sn, sp = rng.random(), rng.random()
        if abs(sn + sp - 1.0) < 1e-3:
            continue
        n_z = 2 if trial % 2 == 0 else 3
        m = build_Stilde_matrix(n_z, sn, sp)
        assert kruskal_rank(m) == 3
        assert numerical_rank(m) == n_z + 1
        if n_z == 2:
            target = (1.0 - sn - sp) ** 2
            for cols in itertools.combinations(range(4), 3):
                sub = m[:, cols]
                for rows in itertools.combinations(range(4), 3):
                    minor = np.linalg.det(sub[rows, :])
                    assert abs(abs(minor) - target) < 1e-12
    elapsed = time.time() - start
    assert elapsed < 10.0
    report("criterion 2 (noisy structural lemmas)", f"{elapsed:.2f}s")


def test_criterion_3_domain_restriction_grid():
    start = time.time()
    grid = np.linspace(0.5, 1.0, 22)[1:]  # 21 points in (0.5, 1]
    perms = [p for p in itertools.permutations(range(4)) if p != (0, 1, 2, 3)]
    for sn in grid:
        for sp in grid:
            m = build_Stilde_matrix(2, sn, sp)
            for p in perms:
                assert not in_family_match(m[:, p], tol=1e-9)
    elapsed = time.time() - start
    assert elapsed < 30.0
    report("criterion 3 (domain restriction 21x21 grid)", f"{elapsed:.2f}s")


def test_criterion_4_population_round_trip():
    start = time.time()
    rng = np.random.default_rng(404)
    worst = 0.0
    cases = [(2, 3, 4)] * 50 + [(3, 7, 8)] * 10
    for idx, (n_z, n_a, n_r) in enumerate(cases):
        params = draw_theorem2_design(rng, n_z=n_z, n_a=n_a, n_r=n_r)
        cells = forward_probabilities(params)
        ident = identify_from_population(
            cells, n_z, n_a, n_r, restarts=20, seed=idx
        )
        ve = ve_estimands(params)
        errs = [
            np.max(np.abs(ident.theta_hat - params.theta[:, 0, :])),
            np.max(np.abs(ident.a_hat - params.a[:, 0, :])),
            abs(ident.sn_s_hat - params.sn_s),
            abs(ident.sp_s_hat - params.sp_s),
            abs(ident.sp_y_hat - params.sp_y),
            np.nanmax(np.abs(ident.ve_s - ve.ve_s)),
            np.nanmax(np.abs(ident.ve_i_marg - ve.ve_i_marg)),
            np.nanmax(np.abs(ident.ve_i_cond - ve.ve_i_cond)),
        ]
        worst = max(worst, max(errs))
        assert max(errs) <= 1e-4, f"design {idx} error {max(errs):.2e}"
    elapsed = time.time() - start
    assert elapsed < 300.0
    report(
        "criterion 4 (identification round-trip, 50+10 designs)",
        f"worst error {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_5_simulator_forward_consistency():
    start = time.time()
    config = scenario_config("two_arm_severe", n=1_000_000, seed=55)
    generated = gen_params(config)
    dataset = simulate_dataset(generated.population, config)
    counts = dataset.cell_counts(config.shape).sum(axis=5)
    n_zr = counts.sum(axis=(0, 1, 2))
    cells = forward_probabilities(generated.population)
    emp = counts / n_zr
    se = np.sqrt(cells.q * (1.0 - cells.q) / n_zr)
    dev = np.abs(emp - cells.q) / np.where(se > 0, se, 1.0)
    elapsed = time.time() - start
    assert dev.max() < 4.0, f"worst deviation {dev.max():.2f} standard errors"
    assert elapsed < 60.0
    report(
        "criterion 5 (simulator vs forward map, n=1e6)",
        f"max {dev.max():.2f} SE across {dev.size} cells, {elapsed:.1f}s",
    )


def test_criterion_6_likelihood_oracle_equivalence():
    rng = np.random.default_rng(606)
    checked = 0
    for _ in range(20):
        params = tiny_params(
            rng, n_a=int(rng.integers(1, 3)), n_r=int(rng.integers(1, 3))
        )
        counts = rng.integers(0, 4, size=(2, 2, params.n_a, 2, params.n_r, 1))
        total_obs = int(counts.sum())
        if total_obs == 0:
            counts[1, 1, 0, 0, 0, 0] = 1
            total_obs = 1
        got = log_likelihood(params, counts)
        want = brute_force_log_likelihood(params, counts)
        assert abs(got - want) <= 1e-10 * total_obs
        # single-observation cells, literally per observation
        for idx in zip(*np.nonzero(counts)):
            single = np.zeros_like(counts)
            single[idx] = 1
            got1 = log_likelihood(params, single)
            want1 = brute_force_log_likelihood(params, single)
            assert abs(got1 - want1) <= 1e-10
        checked += 1
    assert checked >= 20
    report("criterion 6 (likelihood oracle equivalence)", f"{checked} configs")


POWER_MCMC = McmcOptions(chains=2, warmup=600, iters=900, slice_every=2)


@pytest.fixture(scope="module")
def alternative_power():
    return power_study(
        "two_arm_severe",
        [10_000, 40_000],
        replicates=20,
        master_seed=71,
        mcmc=POWER_MCMC,
        jobs=2,
    )


@pytest.fixture(scope="module")
def null_power():
    return power_study(
        "two_arm_severe",
        [4_000],
        replicates=20,
        master_seed=72,
        mcmc=POWER_MCMC,
        null_effect=True,
        jobs=2,
    )


@pytest.mark.slow
def test_criterion_7a_coverage(alternative_power):
    reps = [
        r
        for r in alternative_power.replicates
        if r.n == 40_000 and not r.failed
    ]
    assert len(reps) == 20, [r.error for r in alternative_power.replicates]
    covered = sum(r.covered["VE_I(11),21"] for r in reps)
    assert covered >= 15, f"only {covered}/20 intervals covered the truth"
    report(
        "criterion 7a (coverage at n=40,000)",
        f"{covered}/20 central 95% intervals cover the true effect",
    )


@pytest.mark.slow
def test_criterion_7b_monotone_power(alternative_power):
    by_n = {row.n: row for row in alternative_power.rows}
    p10, p40 = by_n[10_000].power, by_n[40_000].power
    assert by_n[10_000].na == 0 and by_n[40_000].na == 0
    assert p40 > p10, f"power {p40:.2f} at 40k vs {p10:.2f} at 10k"
    report(
        "criterion 7b (monotone power)",
        f"rejection fraction {p10:.2f} at n=10,000 -> {p40:.2f} at n=40,000",
    )


@pytest.mark.slow
def test_criterion_7c_type_i_error(null_power):
    reps = [r for r in null_power.replicates if not r.failed]
    assert len(reps) == 20, [r.error for r in null_power.replicates]
    rejections = sum(r.reject for r in reps)
    assert rejections <= 2, f"{rejections}/20 null rejections"
    report(
        "criterion 7c (Type I at n=4,000 under the null)",
        f"{rejections}/20 rejections",
    )


def test_criterion_8_two_arm_sensitivity_surface():
    rng = np.random.default_rng(808)
    # monotonicity point: the effect depends on one unidentified parameter
    p_obs = {"p110": 0.022, "p111": 0.011, "p100": 0.034, "p101": 0.02}
    p1p1 = p_obs["p111"] + p_obs["p101"]
    p1p0 = p_obs["p110"] + p_obs["p100"]
    for beta_01_2 in (0.0, 0.2, 0.7, 1.0):
        res = two_arm_sensitivity(p_obs, 0.0, beta_01_2, theta_11=p1p1)
        expected = 1.0 - p_obs["p111"] / (
            p_obs["p110"] + beta_01_2 * (p1p1 - p1p0)
        )
        assert abs(res.ve - expected) < 1e-12
    # identifiable-subspace round trip on random feasible points
    for _ in range(100):
        theta, phi, b101, b012 = random_two_arm_truth(rng)
        _, theta_10, theta_01, theta_11 = theta
        beta_11_1, beta_11_2 = phi[0] + phi[1], phi[0] + phi[2]
        p = two_arm_observables(
            theta_01, theta_10, theta_11, b012, b101, beta_11_1, beta_11_2
        )
        res = two_arm_sensitivity(p, b101, b012, theta_11, phi_10=phi[1])
        assert res.feasible
        back = two_arm_observables(
            res.theta_01, res.theta_10, theta_11, b012, b101,
            res.phi_11 + res.phi_10, res.phi_11 + res.phi_01,
        )
        for key in p:
            assert abs(back[key] - p[key]) < 1e-12
    report("criterion 8 (two-arm sensitivity surface)", "100 round trips")


def test_criterion_9_identification_region():
    rng = np.random.default_rng(909)
    for _ in range(50):
        beta = random_beta(rng, 2, 3, low=0.02, high=0.7)
        sn_y = rng.uniform(0.72, 0.995)
        sp_y = rng.uniform(0.75, 0.995)
        p_tilde = p_tilde_from_params(beta, sn_y, sp_y)
        region = identification_region(p_tilde, sp_y)
        finite = p_tilde[~np.isnan(p_tilde)]
        max_p = float(np.max(finite))
        assert region.sn_y == (max_p, 1.0)
        assert region.sn_y[0] < sn_y < region.sn_y[1]
        defined = ~np.isnan(beta)
        # endpoints against the displayed formulas, evaluated directly
        low_direct = (p_tilde - (1.0 - sp_y)) / sp_y
        high_direct = (p_tilde - (1.0 - sp_y)) / (max_p + sp_y - 1.0)
        assert np.nanmax(np.abs(region.beta_low - low_direct)) < 1e-12
        assert np.nanmax(np.abs(region.beta_high - high_direct)) < 1e-12
        assert np.all(region.beta_low[defined] <= beta[defined] + 1e-12)
        assert np.all(beta[defined] <= region.beta_high[defined] + 1e-12)
    report("criterion 9 (identification regions)", "50 fixtures bracket truth")


def test_criterion_10_determinism(tmp_path):
    from strata_id.cli import main

    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(
        json.dumps(
            {"schema": "strata-id/sim-config-v1", "scenario": "two_arm_severe",
             "n": 3000, "seed": 99}
        )
    )
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    assert main(["simulate", str(sim_cfg), "--out", str(out1)]) == 0
    assert main(["simulate", str(sim_cfg), "--out", str(out2)]) == 0
    for name in ("dataset.csv", "params.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    power_args = [
        "power", "two_arm_severe", "--n-grid", "400", "--reps", "2",
        "--chains", "1", "--warmup", "30", "--iters", "30",
        "--slice-every", "0", "--seed", "17",
    ]
    p1, p2 = tmp_path / "p1", tmp_path / "p2"
    assert main([*power_args, "--jobs", "2", "--out", str(p1)]) == 0
    assert main([*power_args, "--jobs", "1", "--out", str(p2)]) == 0
    for name in ("power.csv", "replicates.json"):
        assert (p1 / name).read_bytes() == (p2 / name).read_bytes()
    report(
        "criterion 10 (determinism)",
        "simulate and power reruns byte-identical",
    )
