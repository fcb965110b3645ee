import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from strata_id.strata import (
    EstimandSpec,
    TrialShape,
    all_strata,
    arm_infection_mask,
    comparable_strata,
    count_basic_model,
    count_params_and_dof,
    index_from_bits,
    stratum_from_index,
)


def bits_by_repeated_division(j, m):
    # independent oracle: repeated division by two, least significant first
    out = []
    for _ in range(m):
        out.append(j % 2)
        j //= 2
    return tuple(out)


class TestStratumEncoding:
    def test_worked_example(self):
        assert stratum_from_index(4, 3).bits == (0, 0, 1)
        assert stratum_from_index(4, 5).bits == (0, 0, 1, 0, 0)
        assert index_from_bits((0, 0, 1, 0, 0)) == 4

    def test_zero_maps_to_zero_vector(self):
        for m in (1, 3, 6):
            assert stratum_from_index(0, m).bits == (0,) * m

    def test_round_trip_against_division_oracle(self):
        for j in range(32):
            s = stratum_from_index(j, 5)
            assert s.bits == bits_by_repeated_division(j, 5)
            assert index_from_bits(s.bits) == j

    @given(st.integers(min_value=1, max_value=6), st.data())
    def test_round_trip_exhaustive(self, m, data):
        j = data.draw(st.integers(min_value=0, max_value=2**m - 1))
        assert stratum_from_index(j, m).index == j
        assert index_from_bits(stratum_from_index(j, m).bits) == j

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            stratum_from_index(8, 3)
        with pytest.raises(ValueError):
            stratum_from_index(-1, 3)
        with pytest.raises(ValueError):
            stratum_from_index(0, 0)

    def test_inconsistent_index_rejected(self):
        from strata_id.strata import StratumVector

        with pytest.raises(ValueError):
            StratumVector(bits=(1, 0), index=2)

    def test_mask_matches_bits(self):
        mask = arm_infection_mask(3)
        for j in range(8):
            assert tuple(mask[:, j].astype(int)) == stratum_from_index(j, 3).bits


class TestComparableStrata:
    def test_all_arms_gives_always_infected(self):
        got = comparable_strata(3, {1, 2, 3})
        assert [u.bits for u in got] == [(1, 1, 1)]

    def test_two_of_three_arms(self):
        # oracle: enumerate all 8 strata and filter
        expected = [
            u.bits
            for u in all_strata(3)
            if u.bits[1] == 1 and u.bits[2] == 1
        ]
        got = [u.bits for u in comparable_strata(3, {2, 3})]
        assert got == expected == [(0, 1, 1), (1, 1, 1)]

    def test_empty_arms_rejected(self):
        with pytest.raises(ValueError):
            comparable_strata(2, set())

    def test_cardinality(self):
        for n_z in (2, 3, 4):
            for k in range(1, n_z + 1):
                arms = set(range(1, k + 1))
                assert len(comparable_strata(n_z, arms)) == 2 ** (n_z - k)

    def test_ascending_index_order(self):
        got = comparable_strata(4, {2})
        assert [u.index for u in got] == sorted(u.index for u in got)


def enumerate_free_parameters(shape):
    """Brute-force count of free parameters in the multi-site mixture model."""
    n_u = shape.n_strata
    infection = shape.n_r * (n_u - 1)  # strata simplex per site
    covariate = n_u * (shape.n_a - 1)  # covariate simplex per stratum
    strata_with_infection = sum(
        1 for u in all_strata(int(np.log2(n_u))) if any(u.bits)
    )
    outcome = shape.n_a * strata_with_infection
    dof = 0
    for _ in range(shape.n_r):
        for _ in range(shape.n_z):
            dof += 2 * shape.n_a - 1  # cells (s,y,k) minus one per multinomial
    return infection + covariate, outcome, dof


class TestCounts:
    def test_worked_shape(self):
        got = count_params_and_dof(TrialShape(n_z=2, n_r=4, n_a=3, n_x=1))
        assert got == (4 * 3 + 4 * 2, 3 * 3, 4 * 2 * 5) == (20, 9, 40)

    def test_collapsed_covariate(self):
        assert count_params_and_dof(TrialShape(n_z=2, n_r=1, n_a=1)) == (3, 3, 2)

    def test_matches_enumeration(self):
        for n_z in (2, 3):
            for n_r in (1, 2, 4):
                for n_a in (1, 3, 4):
                    shape = TrialShape(n_z=n_z, n_r=n_r, n_a=n_a)
                    assert count_params_and_dof(shape) == enumerate_free_parameters(
                        shape
                    )

    def test_basic_model_counts(self):
        # single-site, no-covariate model: 8 parameters vs 4 degrees of freedom
        assert count_basic_model(2) == (3 + (2 * 1 + 1 * 3), 4) == (8, 4)
        n_params, dof = count_basic_model(3)
        assert n_params == 7 + (3 * 1 + 3 * 3 + 1 * 7)
        assert dof == 6


class TestEstimandSpec:
    def test_principal_effect_needs_infection_under_both_arms(self):
        u = stratum_from_index(1, 2)  # infected under arm 1 only
        with pytest.raises(ValueError):
            EstimandSpec(kind="VE_I_marginal", arms=(2, 1), stratum=u)
        EstimandSpec(
            kind="VE_I_marginal", arms=(2, 1), stratum=stratum_from_index(3, 2)
        )

    def test_labels(self):
        always = stratum_from_index(3, 2)
        assert EstimandSpec(kind="VE_S", arms=(2, 1)).label() == "VE_S,21"
        assert (
            EstimandSpec(kind="VE_I_marginal", arms=(2, 1), stratum=always).label()
            == "VE_I(11),21"
        )

    def test_composite_requires_arms(self):
        always = stratum_from_index(7, 3)
        with pytest.raises(ValueError):
            EstimandSpec(kind="composite", stratum=always)
        EstimandSpec(kind="composite", stratum=always, composite_arms=(3, 2, 1))


def test_trial_shape_validation():
    with pytest.raises(ValueError):
        TrialShape(n_z=1, n_r=1, n_a=1)
    with pytest.raises(ValueError):
        TrialShape(n_z=2, n_r=0, n_a=1)
