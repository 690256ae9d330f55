import numpy as np
import pytest
from oracles import permutation_assignment_minimum, simulated_cohort

from cohortmatch.pairmatch import BipartiteSpec, baseline_distance, match_baseline_mopt, match_optimal_pairs
from cohortmatch.statdist import CovariateTable, propensity_scores, standardized_mean_differences
from cohortmatch.templatematch import MatchError


def test_supplement_toy_match():
    # crafted so T1-C3, T2-C1, T3-C4 is the unique optimum
    D = np.full((3, 5), 4.0)
    D[0, 2] = D[1, 0] = D[2, 3] = 1.0
    D[0, 0] = 1.5  # tempting but worse overall
    m = match_optimal_pairs(BipartiteSpec(D))
    assert m.pairs == (("T1", "C3"), ("T2", "C1"), ("T3", "C4"))
    assert m.s2_pairing_cost == pytest.approx(3.0)
    assert m.s1_template_cost == 0.0


def test_single_pair():
    m = match_optimal_pairs(BipartiteSpec(np.array([[2.5]])))
    assert m.pairs == (("T1", "C1"),) and m.objective == 2.5


@pytest.mark.parametrize("seed", range(20))
def test_permutation_oracle(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 7))
    C = int(rng.integers(T, 8))
    D = rng.random((T, C))
    m = match_optimal_pairs(BipartiteSpec(D))
    assert m.objective == pytest.approx(permutation_assignment_minimum(D), rel=1e-9)
    assert len(set(m.control_ids)) == T


def test_partial_pairing_with_absent_entries():
    rng = np.random.default_rng(3)
    for _ in range(20):
        D = rng.random((5, 6))
        D[rng.random(D.shape) < 0.3] = np.inf
        m = match_optimal_pairs(BipartiteSpec(D, pairs_requested=3))
        best = permutation_assignment_minimum(D, 3)
        if np.isfinite(best):
            assert m.feasible and m.objective == pytest.approx(best, rel=1e-9)
        else:
            assert not m.feasible and m.diagnostics


def test_infeasible_diagnostic():
    D = np.array([[1.0, np.inf], [2.0, np.inf]])
    m = match_optimal_pairs(BipartiteSpec(D))
    assert not m.feasible
    assert "at most 1 of 2" in m.diagnostics[0]


def test_spec_validation():
    with pytest.raises(MatchError):
        BipartiteSpec(np.zeros((0, 3)))
    with pytest.raises(MatchError):
        BipartiteSpec(np.ones((2, 3)), pairs_requested=3)
    with pytest.raises(MatchError):
        BipartiteSpec(-np.ones((2, 3)))


def test_duplicated_controls_give_zero_distance():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(15, 4))
    table = CovariateTable.from_groups(rng.normal(size=(3, 2)), X, np.vstack([X[::-1], rng.normal(size=(5, 4))]), 2)
    m = match_baseline_mopt(table)
    assert m.objective == pytest.approx(0.0, abs=1e-12)
    assert len(m.pairs) == 15


def test_baseline_matches_oracle_on_penalized_distance():
    rng = np.random.default_rng(10)
    for _ in range(5):
        table = simulated_cohort(rng, 2, 4, 6, 3, d1=2)
        m = match_baseline_mopt(table)
        D = baseline_distance(table)
        assert m.objective == pytest.approx(permutation_assignment_minimum(D), rel=1e-9)


def test_baseline_needs_enough_controls():
    table = simulated_cohort(np.random.default_rng(1), 2, 6, 4, 3, d1=2)
    with pytest.raises(MatchError, match="at least as many"):
        match_baseline_mopt(table)


def test_baseline_balances_simulated_cohort():
    rng = np.random.default_rng(2024)
    table = simulated_cohort(rng, 300, 1000, 3000, 10, shift_treated=0.5)
    ps = propensity_scores(table)
    m = match_baseline_mopt(table, propensity=ps)
    assert len(m.pairs) == 1000
    report = standardized_mean_differences(table, m.treated_ids, m.control_ids, covariates=["X1"])
    assert abs(report.smd("X1")) < 0.1
