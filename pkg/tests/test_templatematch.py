import math

import numpy as np
import pytest
from oracles import enumeration_minimum, simulated_cohort, tiny_table

from cohortmatch.statdist import DataError, DistanceMatrices
from cohortmatch.templatematch import (
    CATEGORY_OVERFLOW,
    CATEGORY_SINK,
    CONTROL_CATEGORY,
    SOURCE_TEMPLATE,
    TEMPLATE_TREATED,
    TREATED_CONTROL,
    TREATED_INTERNAL,
    Caliper,
    FineBalance,
    MatchError,
    TemplateMatchSpec,
    build_template_network,
    compute_distances,
    enumerate_matched_samples,
    enumerate_template_assignments,
    force_include,
    prefers_assignment,
    remove_exact_mismatch,
    solve_template_match,
    template_match,
)


def random_instance(rng, R, T, C, absent=0.0):
    delta = rng.random((R, T))
    Delta = rng.random((T, C))
    if absent:
        Delta[rng.random((T, C)) < absent] = np.inf
    return tiny_table(R, T, C), DistanceMatrices(delta, Delta)


def solve(table, dist, method="auto", **kw):
    spec = TemplateMatchSpec(**kw)
    return solve_template_match(build_template_network(table, dist, spec), spec, method)


def as_index_pairs(sample):
    return frozenset((int(t[1:]) - 1, int(c[1:]) - 1) for t, c in sample.pairs)


# ---------------------------------------------------------------- structure


def test_toy_counts():
    table, dist = random_instance(np.random.default_rng(0), 3, 4, 6)
    tn = build_template_network(table, dist, TemplateMatchSpec(k=1, lam=1.0))
    assert tn.net.node_count == 19
    assert tn.net.arc_count == 49


def test_count_formulas_random_sweep():
    rng = np.random.default_rng(7)
    for _ in range(60):
        R = int(rng.integers(1, 6))
        T = int(rng.integers(R, 9))
        C = int(rng.integers(1, 11))
        table, dist = random_instance(rng, R, T, C)
        tn = build_template_network(table, dist, TemplateMatchSpec(k=1))
        assert tn.net.node_count == R + 2 * T + C + 2
        assert tn.net.arc_count == R + R * T + T + T * C + C


def test_capacities_and_zero_cost_arcs():
    table, dist = random_instance(np.random.default_rng(1), 2, 5, 6)
    tn = build_template_network(table, dist, TemplateMatchSpec(k=2, lam=3.0))
    net = tn.net
    src = tn.kinds == SOURCE_TEMPLATE
    assert np.all(net.capacity[src] == 2)
    assert np.all(net.capacity[~src] == 1)
    assert np.all(net.cost[src] == 0) and np.all(net.cost[tn.kinds == TREATED_INTERNAL] == 0)
    left = tn.kinds == TEMPLATE_TREATED
    assert np.array_equal(net.cost[left], np.rint(1e5 * dist.delta[tn.arc_a[left], tn.arc_b[left]]))
    right = tn.kinds == TREATED_CONTROL
    assert np.array_equal(net.cost[right], np.rint(3e5 * dist.Delta[tn.arc_a[right], tn.arc_b[right]]))
    assert net.supply == 4


def test_node_roles():
    table, dist = random_instance(np.random.default_rng(0), 3, 4, 6)
    tn = build_template_network(table, dist, TemplateMatchSpec())
    assert tn.describe_node(0) == ("source", None)
    assert tn.describe_node(tn.template_node(2)) == ("template", "K3")
    assert tn.describe_node(tn.treated_node(0)) == ("treated", "T1")
    assert tn.describe_node(tn.treated_copy_node(3)) == ("treated_copy", "T4")
    assert tn.describe_node(tn.control_node(5)) == ("control", "C6")
    assert tn.describe_node(18) == ("sink", None)


def test_sparsify_keeps_nearest_controls():
    rng = np.random.default_rng(3)
    table, dist = random_instance(rng, 3, 4, 6)
    ps_t = np.array([0.1, 0.5, 0.9, 0.3])
    ps_c = np.array([0.0, 0.2, 0.2, 0.6, 0.8, 1.0])
    dist = dist._replace(treated_scores=ps_t, control_scores=ps_c)
    tn = build_template_network(table, dist, TemplateMatchSpec(sparsify=2))
    right = tn.kinds == TREATED_CONTROL
    assert right.sum() == 8
    kept = {t: sorted(tn.arc_b[right & (tn.arc_a == t)].tolist()) for t in range(4)}
    # T1 at 0.1: gaps 0.1 (C1), 0.1 (C2), 0.1 (C3) -> ties broken by control index
    assert kept[0] == [0, 1]
    assert kept[1] == [3, 1] or kept[1] == [1, 3]
    assert kept[2] == [4, 5]
    assert kept[3] == [1, 2]


def test_sparsify_needs_scores():
    table, dist = random_instance(np.random.default_rng(3), 1, 2, 3)
    with pytest.raises(MatchError, match="propensity"):
        build_template_network(table, dist, TemplateMatchSpec(sparsify=1))


def test_absent_entries_produce_no_arcs():
    table, dist = random_instance(np.random.default_rng(4), 2, 4, 5, absent=0.4)
    tn = build_template_network(table, dist, TemplateMatchSpec())
    assert tn.arc_count(TREATED_CONTROL) == int(np.isfinite(dist.Delta).sum())


def test_spec_validation():
    with pytest.raises(MatchError):
        TemplateMatchSpec(k=0)
    with pytest.raises(MatchError):
        TemplateMatchSpec(lam=0)
    with pytest.raises(MatchError):
        TemplateMatchSpec(cost_scale=0)
    table, dist = random_instance(np.random.default_rng(0), 2, 3, 4)
    with pytest.raises(MatchError, match="floor"):
        build_template_network(table, dist, TemplateMatchSpec(k=2))
    with pytest.raises(DataError):
        build_template_network(table, DistanceMatrices(dist.delta[:, :2], dist.Delta), TemplateMatchSpec())


def test_overflow_guard():
    table, dist = random_instance(np.random.default_rng(0), 1, 2, 2)
    with pytest.raises(MatchError, match="overflow"):
        build_template_network(table, dist, TemplateMatchSpec(cost_scale=10**18, lam=100))


# ---------------------------------------------------------------- solving


def test_single_unit_instance():
    table = tiny_table(1, 1, 1)
    m = solve(table, DistanceMatrices(np.array([[0.3]]), np.array([[0.7]])), lam=1.0)
    assert m.feasible
    assert m.pairs == (("T1", "C1"),)
    assert m.objective == pytest.approx(1.0)
    assert m.s1_template_cost == pytest.approx(0.3) and m.s2_pairing_cost == pytest.approx(0.7)


def test_figure_toy_flow():
    # distances crafted so that K1->T1->C1, K2->T2->C5, K3->T3->C4 is the unique optimum
    delta = np.full((3, 4), 5.0)
    delta[0, 0] = delta[1, 1] = delta[2, 2] = 0.1
    Delta = np.full((4, 6), 5.0)
    Delta[0, 0] = Delta[1, 4] = Delta[2, 3] = 0.2
    m = solve(tiny_table(3, 4, 6), DistanceMatrices(delta, Delta), lam=1.0)
    assert set(m.pairs) == {("T1", "C1"), ("T2", "C5"), ("T3", "C4")}
    assert set(m.template_assignment) == {("K1", "T1"), ("K2", "T2"), ("K3", "T3")}


@pytest.mark.parametrize("method", ["flow", "assignment"])
@pytest.mark.parametrize("lam", [0.01, 1.0, 100.0])
def test_enumeration_optimality_small(lam, method):
    rng = np.random.default_rng(11)
    for _ in range(15):
        table, dist = random_instance(rng, 2, 3, 4)
        m = solve(table, dist, method, lam=lam)
        best = enumeration_minimum(dist.delta, dist.Delta, 1, lam)
        assert m.objective == pytest.approx(best[0], rel=1e-9)
        assert as_index_pairs(m) == best[3]


@pytest.mark.parametrize("method", ["flow", "assignment"])
def test_enumeration_optimality_k2_with_absent_entries(method):
    rng = np.random.default_rng(12)
    for _ in range(15):
        table, dist = random_instance(rng, 2, 5, 6, absent=0.3)
        m = solve(table, dist, method, k=2, lam=1.0)
        best = enumeration_minimum(dist.delta, dist.Delta, 2, 1.0)
        if best is None:
            assert not m.feasible
        else:
            assert m.feasible
            assert m.objective == pytest.approx(best[0], rel=1e-9)


def test_solver_methods_agree():
    rng = np.random.default_rng(15)
    for _ in range(40):
        R = int(rng.integers(1, 4))
        k = int(rng.integers(1, 3))
        T = k * R + int(rng.integers(0, 5))
        C = k * R + int(rng.integers(0, 12))  # often more controls than pairs: pruning is active
        table, dist = random_instance(rng, R, T, C, absent=float(rng.choice([0.0, 0.4])))
        lam = float(rng.choice([0.01, 1.0, 100.0]))
        spec = TemplateMatchSpec(k=k, lam=lam)
        if rng.random() < 0.3:
            spec = force_include(spec, [f"T{t + 1}" for t in range(k * R)], penalty=2.0)
        tn = build_template_network(table, dist, spec)
        a = solve_template_match(tn, method="flow")
        b = solve_template_match(tn, method="assignment")
        assert a.feasible == b.feasible
        if a.feasible:
            assert a.flow_cost == b.flow_cost
            assert b.objective == pytest.approx(a.objective, rel=1e-9, abs=1e-12)
        else:
            assert a.diagnostics == b.diagnostics


def test_solver_methods_agree_at_simulation_scale():
    table = simulated_cohort(np.random.default_rng(16), 40, 150, 400, 6, shift_treated=0.5)
    dist = compute_distances(table)
    for k, lam in [(1, 0.01), (2, 1.0), (3, 100.0)]:
        tn = build_template_network(table, dist, TemplateMatchSpec(k=k, lam=lam))
        a = solve_template_match(tn, method="flow")
        b = solve_template_match(tn, method="assignment")
        assert a.feasible and b.feasible
        assert a.flow_cost == b.flow_cost


def test_auto_method_follows_cost_balance():
    table, dist = random_instance(np.random.default_rng(18), 2, 4, 5)
    small = build_template_network(table, dist, TemplateMatchSpec(lam=0.01))
    large = build_template_network(table, dist, TemplateMatchSpec(lam=100.0))
    assert not prefers_assignment(small) and prefers_assignment(large)
    huge = build_template_network(table, dist, TemplateMatchSpec(lam=1e6, cost_scale=1e9))
    assert not prefers_assignment(huge)  # float sums would no longer be exact


def test_solver_method_validation():
    table, dist = random_instance(np.random.default_rng(17), 1, 2, 2)
    tn = build_template_network(table, dist, TemplateMatchSpec())
    with pytest.raises(MatchError, match="unknown solver method"):
        solve_template_match(tn, method="simplex")
    fb = TemplateMatchSpec(fine_balance=FineBalance("site", {"a": 1}, 1.0))
    tn = build_template_network(tiny_table(1, 2, 2, {"site": np.array(["x", "x", "x", "a", "b"])}), dist, fb)
    with pytest.raises(MatchError, match="assignment solver"):
        solve_template_match(tn, method="assignment")
    assert solve_template_match(tn).feasible


def test_lambda_tradeoff_is_monotone():
    rng = np.random.default_rng(13)
    for _ in range(30):
        table, dist = random_instance(rng, 2, 5, 6)
        runs = [solve(table, dist, lam=lam) for lam in (0.01, 1.0, 100.0)]
        s1 = [m.s1_template_cost for m in runs]
        s2 = [m.s2_pairing_cost for m in runs]
        assert s2[0] >= s2[1] - 1e-12 >= s2[2] - 2e-12
        assert s1[0] <= s1[1] + 1e-12 <= s1[2] + 2e-12


def test_pair_set_validity():
    rng = np.random.default_rng(14)
    for _ in range(30):
        R = int(rng.integers(1, 4))
        k = int(rng.integers(1, 3))
        T = k * R + int(rng.integers(0, 4))
        C = T + int(rng.integers(0, 4))
        table, dist = random_instance(rng, R, T, C)
        m = solve(table, dist, k=k)
        assert len(m.pairs) == k * R
        assert len(set(m.treated_ids)) == len(set(m.control_ids)) == k * R
        per_template = {}
        for r, t in m.template_assignment:
            per_template[r] = per_template.get(r, 0) + 1
        assert max(per_template.values()) <= k
        assert {t for _, t in m.template_assignment} == set(m.treated_ids)


def test_infeasible_reports_pairing_layer():
    table, dist = random_instance(np.random.default_rng(5), 2, 4, 4)
    Delta = dist.Delta.copy()
    Delta[:, 1:] = np.inf  # every treated unit can only use C1
    tn = build_template_network(table, dist._replace(Delta=Delta), TemplateMatchSpec())
    m = solve_template_match(tn)
    assert not m.feasible
    assert any("treated->control" in line for line in m.diagnostics)
    assert math.isnan(m.objective)


def test_infeasible_reports_template_layer():
    table, dist = random_instance(np.random.default_rng(5), 2, 4, 4)
    delta = dist.delta.copy()
    delta[:, 1:] = np.inf  # both template units only reach T1
    tn = build_template_network(table, dist._replace(delta=delta), TemplateMatchSpec())
    m = solve_template_match(tn)
    assert not m.feasible
    assert any("template->treated" in line for line in m.diagnostics)


def test_empty_template_row_warning():
    table, dist = random_instance(np.random.default_rng(5), 2, 4, 4)
    delta = dist.delta.copy()
    delta[1] = np.inf
    tn = build_template_network(table, dist._replace(delta=delta), TemplateMatchSpec())
    assert any("K2" in w for w in tn.warnings)
    m = solve_template_match(tn)
    assert not m.feasible and any("K2" in w for w in m.warnings)


# ---------------------------------------------------------------- enumeration


def test_enumeration_counts():
    assert len(enumerate_matched_samples(3, 4, 6, k=1)) == 480
    assert len(enumerate_matched_samples(1, 1, 1, k=1)) == 1
    assert len(enumerate_matched_samples(1, 2, 2, k=2)) == 2
    outcomes = enumerate_matched_samples(3, 4, 6)
    assert len({c.pairs for c in outcomes}) == 480


def test_enumeration_guard():
    with pytest.raises(MatchError, match="guard"):
        enumerate_matched_samples(3, 20, 30)


def test_template_assignment_count():
    # (kR)! / (k!)^R ways to split the subset among template units
    assert len(list(enumerate_template_assignments(2, 2, [0, 1, 2, 3]))) == 6
    assert len(list(enumerate_template_assignments(3, 1, [4, 5, 6]))) == 6


def test_solution_is_among_enumerated_outcomes():
    rng = np.random.default_rng(21)
    table, dist = random_instance(rng, 2, 3, 4)
    m = solve(table, dist, lam=1.0)
    outcomes = {frozenset(c.pairs) for c in enumerate_matched_samples(2, 3, 4)}
    assert as_index_pairs(m) in outcomes


# ---------------------------------------------------------------- exact matching


def test_exact_mismatch_scan():
    rng = np.random.default_rng(8)
    cat = np.array(["a", "b"], dtype=object)[rng.integers(0, 2, size=2 + 5 + 7)]
    table = tiny_table(2, 5, 7, categories={"site": cat})
    dist = DistanceMatrices(rng.random((2, 5)), rng.random((5, 7)))
    out = remove_exact_mismatch(dist, table, ["site"])
    site = table.column("site")
    Tr, Co = table.rows("treated"), table.rows("control")
    for t in range(5):
        for c in range(7):
            assert np.isfinite(out.Delta[t, c]) == (site[Tr[t]] == site[Co[c]])
    assert np.array_equal(out.delta, dist.delta)
    assert remove_exact_mismatch(dist, table, []) is dist
    with pytest.raises(DataError, match="unknown"):
        remove_exact_mismatch(dist, table, ["nope"])


def test_exact_total_disagreement_warns():
    R, T, C = 1, 3, 4
    flag = np.array(["0"] * R + ["1"] * T + ["0"] * C, dtype=object)
    flag[R + 1] = "0"
    table = tiny_table(R, T, C, categories={"flag": flag})
    dist = DistanceMatrices(np.random.default_rng(0).random((R, T)), np.random.default_rng(1).random((T, C)))
    tn = build_template_network(table, dist, TemplateMatchSpec(exact_columns=["flag"]))
    copies = [tn.treated_copy_node(t) for t in range(T)]
    assert [len(tn.outgoing(n)) for n in copies] == [0, C, 0]
    assert any("T1" in w for w in tn.warnings) and any("T3" in w for w in tn.warnings)
    m = solve_template_match(tn)
    assert m.pairs[0][0] == "T2"


# ---------------------------------------------------------------- fine balance


def fine_balance_instance(rng, R=3, T=5, C=6):
    cats = ["x", "y"]
    labels = np.array(["x"] * (R + T) + [cats[i % 2] for i in range(C)], dtype=object)
    table = tiny_table(R, T, C, categories={"grp": labels})
    dist = DistanceMatrices(rng.random((R, T)), rng.random((T, C)))
    ctrl_cat = [cats[i % 2] for i in range(C)]
    return table, dist, ctrl_cat


def test_fine_balance_targets_zero_costs():
    rng = np.random.default_rng(30)
    table, _, ctrl_cat = fine_balance_instance(rng)
    dist = DistanceMatrices(np.zeros((3, 5)), np.zeros((5, 6)))
    spec = TemplateMatchSpec(fine_balance=FineBalance("grp", {"x": 2, "y": 1}, 10.0))
    tn = build_template_network(table, dist, spec)
    assert tn.categories == ("x", "y")
    assert tn.net.node_count == 3 + 10 + 6 + 2 + 2
    m = solve_template_match(tn)
    got = [ctrl_cat[int(c[1:]) - 1] for c in m.control_ids]
    assert sorted(got) == ["x", "x", "y"]


def test_fine_balance_matches_constrained_enumeration():
    rng = np.random.default_rng(31)
    for _ in range(10):
        table, dist, ctrl_cat = fine_balance_instance(rng)
        spec = TemplateMatchSpec(lam=1.0, fine_balance=FineBalance("grp", {"x": 1, "y": 2}, 1e3))
        m = solve(table, dist, lam=1.0, fine_balance=spec.fine_balance)

        def accept(controls):
            return sum(ctrl_cat[c] == "y" for c in controls) == 2

        best = enumeration_minimum(dist.delta, dist.Delta, 1, 1.0, accept=accept)
        assert m.objective == pytest.approx(best[0], rel=1e-9)


def test_fine_balance_free_overflow_equals_unconstrained():
    rng = np.random.default_rng(32)
    for _ in range(10):
        table, dist, _ = fine_balance_instance(rng)
        plain = solve(table, dist, lam=1.0)
        free = solve(table, dist, lam=1.0, fine_balance=FineBalance("grp", {"x": 3, "y": 0}, 0.0))
        assert free.objective == pytest.approx(plain.objective, rel=1e-12)


def test_fine_balance_single_category_is_vacuous():
    rng = np.random.default_rng(33)
    R, T, C = 2, 4, 5
    table = tiny_table(R, T, C, categories={"one": np.array(["z"] * (R + T + C), dtype=object)})
    dist = DistanceMatrices(rng.random((R, T)), rng.random((T, C)))
    plain = solve(table, dist)
    fb = solve(table, dist, fine_balance=FineBalance("one", {"z": 2}, 5.0))
    assert fb.pairs == plain.pairs


def test_fine_balance_structure_and_errors():
    rng = np.random.default_rng(34)
    table, dist, _ = fine_balance_instance(rng)
    tn = build_template_network(table, dist, TemplateMatchSpec(fine_balance=FineBalance("grp", {"x": 2, "y": 1}, 0.5)))
    assert tn.arc_count(CONTROL_CATEGORY) == 6
    over = tn.kinds == CATEGORY_OVERFLOW
    assert np.all(tn.net.capacity[over] == 3) and np.all(tn.net.cost[over] == 50000)
    assert sorted(tn.net.capacity[tn.kinds == CATEGORY_SINK].tolist()) == [1, 2]
    with pytest.raises(MatchError, match="sum"):
        build_template_network(table, dist, TemplateMatchSpec(fine_balance=FineBalance("grp", {"x": 2, "y": 2}, 0.5)))


# ---------------------------------------------------------------- forced inclusion


def test_force_include_exact_subset():
    rng = np.random.default_rng(40)
    for _ in range(10):
        table, dist = random_instance(rng, 2, 5, 5)
        want = sorted(rng.choice(5, size=2, replace=False).tolist())
        ids = [f"T{t + 1}" for t in want]
        spec = force_include(TemplateMatchSpec(lam=1.0), ids, penalty=50.0, table=table)
        m = solve_template_match(build_template_network(table, dist, spec))
        assert sorted(m.treated_ids) == sorted(ids)


def test_force_include_larger_subset_picks_cheapest():
    rng = np.random.default_rng(41)
    for _ in range(10):
        table, dist = random_instance(rng, 2, 5, 5)
        allowed = [0, 1, 3]
        spec = force_include(TemplateMatchSpec(lam=1.0), [f"T{t + 1}" for t in allowed], penalty=50.0)
        m = solve_template_match(build_template_network(table, dist, spec))
        penalty = [0.0 if t in allowed else 50.0 for t in range(5)]
        best = enumeration_minimum(dist.delta, dist.Delta, 1, 1.0, penalty=penalty)
        assert m.s1_template_cost + m.s2_pairing_cost == pytest.approx(best[1] + best[2], rel=1e-9)
        assert set(int(t[1:]) - 1 for t in m.treated_ids) <= set(allowed)


def test_force_include_empty_is_unforced():
    table, dist = random_instance(np.random.default_rng(42), 2, 4, 5)
    assert solve(table, dist, forced_include=(), forced_penalty=9.0).pairs == solve(table, dist).pairs


def test_force_include_errors():
    table, _ = random_instance(np.random.default_rng(43), 1, 2, 2)
    with pytest.raises(DataError, match="unknown"):
        force_include(TemplateMatchSpec(), ["T9"], 1.0, table=table)
    with pytest.raises(MatchError, match="not treated"):
        force_include(TemplateMatchSpec(), ["C1"], 1.0, table=table)
    with pytest.raises(MatchError):
        force_include(TemplateMatchSpec(), ["T1"], 0.0)


# ---------------------------------------------------------------- distances end to end


def test_hard_caliper_is_respected():
    rng = np.random.default_rng(50)
    table = simulated_cohort(rng, 20, 80, 200, 6)
    dist = compute_distances(table, Delta_caliper=Caliper(0.05))
    m = template_match(table, TemplateMatchSpec(k=1, lam=1.0), dist=dist)
    assert m.feasible and len(m.pairs) == 20
    Tr, Co = table.rows("treated"), table.rows("control")
    pos_t = {table.unit_ids[r]: i for i, r in enumerate(Tr)}
    pos_c = {table.unit_ids[r]: i for i, r in enumerate(Co)}
    gaps = [abs(dist.treated_scores[pos_t[t]] - dist.control_scores[pos_c[c]]) for t, c in m.pairs]
    assert max(gaps) <= 0.05


def test_impossible_caliper_is_infeasible():
    rng = np.random.default_rng(51)
    table = simulated_cohort(rng, 5, 30, 60, 6)
    spec = TemplateMatchSpec(Delta_caliper=Caliper(1e-9))
    m = template_match(table, spec)
    assert not m.feasible
    assert any("treated->control" in line for line in m.diagnostics)


def test_template_match_moves_toward_template():
    rng = np.random.default_rng(52)
    table = simulated_cohort(rng, 50, 250, 750, 10)
    m = template_match(table, TemplateMatchSpec(k=1, lam=1.0))
    x1 = table.column("X1")
    chosen = table.index_of(m.treated_ids)
    assert abs(x1[chosen].mean() - x1[table.rows("template")].mean()) < abs(
        x1[table.rows("treated")].mean() - x1[table.rows("template")].mean()
    )


def test_unknown_distance_kinds():
    table = simulated_cohort(np.random.default_rng(53), 3, 10, 20, 6)
    with pytest.raises(MatchError):
        compute_distances(table, delta_kind="nope")
    with pytest.raises(MatchError):
        compute_distances(table, Delta_kind="nope")
    for kind in ("mahalanobis", "propensity_abs_diff"):
        dist = compute_distances(table, delta_kind="mahalanobis_shared", Delta_kind=kind, Delta_caliper=None)
        assert dist.Delta.shape == (10, 20) and np.all(np.isfinite(dist.Delta))
