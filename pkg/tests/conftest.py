import math

import numpy as np
import pytest

from strata_id.design import check_design
from strata_id.oracle import PopulationParams
from strata_id.strata import arm_infection_mask


def logit(p):
    return math.log(p / (1.0 - p))


def two_arm_outcome_tables(n_a):
    """The worked two-arm severe-illness outcome settings."""
    alpha = np.full((4, 2), np.nan)
    delta = np.zeros((4, 2, n_a))
    k = np.arange(n_a, dtype=float)
    alpha[3, 0] = logit(0.3)
    alpha[3, 1] = logit(0.3) + math.log(0.4)
    delta[3, 0, :] = k * math.log(0.925)
    delta[3, 1, :] = k * math.log(0.825)
    alpha[1, 0] = logit(0.15)
    delta[1, 0, :] = k * math.log(0.925)
    alpha[2, 1] = logit(0.2)
    return alpha, delta


def random_beta(rng, n_z, n_a, low=0.05, high=0.6):
    mask = arm_infection_mask(n_z)
    n_u = 2**n_z
    beta = np.full((n_u, n_z, n_a), np.nan)
    for u in range(n_u):
        for z in range(n_z):
            if mask[z, u] == 1.0:
                beta[u, z, :] = rng.uniform(low, high, size=n_a)
    return beta


def two_arm_beta_from_tables(n_a):
    alpha, delta = two_arm_outcome_tables(n_a)
    mask = arm_infection_mask(2)
    beta = np.full((4, 2, n_a), np.nan)
    for u in range(4):
        for z in range(2):
            if mask[z, u] == 1.0:
                beta[u, z, :] = 1.0 / (1.0 + np.exp(-(alpha[u, z] + delta[u, z, :])))
    return beta


def draw_theorem2_design(
    rng,
    n_z=2,
    n_a=3,
    n_r=4,
    strata_conc=None,
    sn_s=0.8,
    sp_s=0.99,
    sn_y=0.99,
    sp_y=0.9,
    condition_floor=1e-4,
):
    """Random design satisfying the noisy-identification hypotheses.

    Draws site strata proportions and covariate mixtures from Dirichlet
    distributions, redrawing until the rank conditions hold with enough
    numerical margin for high-precision recovery checks.
    """
    if strata_conc is None:
        strata_conc = (
            [91, 5, 0.5, 3.5] if n_z == 2 else [91, 5, 2, 2, 2, 2, 2, 3.5]
        )
    n_u = 2**n_z
    while True:
        theta = rng.dirichlet(np.asarray(strata_conc, float), size=n_r)
        a = rng.dirichlet(2.0 * np.ones(n_a), size=n_u)
        report = check_design(a.T, theta.T, sn_s, sp_s, "T2")
        if not (report.passed and not report.warnings):
            continue
        sv = np.linalg.svd(theta.T, compute_uv=False)
        if sv[-1] < condition_floor * sv[0]:
            continue
        break
    if n_z == 2:
        beta = two_arm_beta_from_tables(n_a)
    else:
        beta = random_beta(rng, n_z, n_a)
    return PopulationParams.from_single_x(
        theta, a, beta, sn_s=sn_s, sp_s=sp_s, sn_y=sn_y, sp_y=sp_y
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
