"""Tripartite template-matching network: build, solve, extract pairs.

Node layout (ids are contiguous blocks)::

    0                      source
    1 .. R                 template units
    R+1 .. R+T             treated units, left copy
    R+T+1 .. R+2T          treated units, right copy
    R+2T+1 .. R+2T+C       control units
    R+2T+C+1               sink
    R+2T+C+2 ..            fine-balance category nodes (optional)

The source emits ``k*R`` units.  A treated unit enters the match when one
unit of flow passes template -> treated -> treated copy -> control, so the
left half selects treated units that resemble the template and the right
half pairs them with controls.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching, min_weight_full_bipartite_matching

from cohortmatch.flownet import FlowNetwork, build_network_arrays, solve_min_cost_flow
from cohortmatch.statdist import (
    CovariateTable,
    DataError,
    DistanceMatrices,
    apply_caliper,
    mahalanobis_matrix,
    participation_scores,
    propensity_scores,
    robust_mahalanobis_matrix,
)

# arc kinds
SOURCE_TEMPLATE = 0
TEMPLATE_TREATED = 1
TREATED_INTERNAL = 2
TREATED_CONTROL = 3
CONTROL_SINK = 4
CONTROL_CATEGORY = 5
CATEGORY_SINK = 6
CATEGORY_OVERFLOW = 7

ARC_KINDS = {
    SOURCE_TEMPLATE: "source->template",
    TEMPLATE_TREATED: "template->treated",
    TREATED_INTERNAL: "treated->treated'",
    TREATED_CONTROL: "treated'->control",
    CONTROL_SINK: "control->sink",
    CONTROL_CATEGORY: "control->category",
    CATEGORY_SINK: "category->sink",
    CATEGORY_OVERFLOW: "category->sink (overflow)",
}

MAX_INT_COST = 2**62
ENUMERATION_LIMIT = 10**6

DELTA_KINDS = ("participation_abs_diff", "mahalanobis_shared")
PAIRING_KINDS = ("robust_mahalanobis", "mahalanobis", "propensity_abs_diff")


class MatchError(ValueError):
    """Invalid matching specification or inputs."""


@dataclass(frozen=True)
class Caliper:
    width: float
    mode: str = "hard"
    penalty_weight: float = 1000.0

    def __post_init__(self):
        if not self.width > 0:
            raise MatchError("caliper width must be positive")
        if self.mode not in ("hard", "penalty"):
            raise MatchError(f"unknown caliper mode {self.mode!r}")


@dataclass(frozen=True)
class FineBalance:
    column: str
    targets: Mapping[str, int]
    overflow_penalty: float


@dataclass(frozen=True)
class TemplateMatchSpec:
    """Design options for one template match.

    ``lam`` multiplies the treated-to-control distances; ``cost_scale``
    converts float distances to the integer arc costs used by the solver.
    """

    k: int = 1
    lam: float = 100.0
    cost_scale: int = 10**5
    exact_columns: tuple = ()
    fine_balance: Optional[FineBalance] = None
    sparsify: int = 0
    forced_include: tuple = ()
    forced_penalty: float = 0.0
    delta_caliper: Optional[Caliper] = None
    Delta_caliper: Optional[Caliper] = Caliper(0.05)

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise MatchError(f"k must be a positive integer, got {self.k}")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise MatchError(f"lambda must be positive, got {self.lam}")
        if int(self.cost_scale) != self.cost_scale or self.cost_scale < 1:
            raise MatchError(f"cost_scale must be an integer >= 1, got {self.cost_scale}")
        if self.sparsify < 0:
            raise MatchError("sparsify count must be >= 0")
        if self.forced_penalty < 0:
            raise MatchError("forced-inclusion penalty must be >= 0")
        object.__setattr__(self, "exact_columns", tuple(self.exact_columns))
        object.__setattr__(self, "forced_include", tuple(self.forced_include))

    def check_sizes(self, R: int, T: int) -> None:
        if R < 1:
            raise MatchError("template matching needs at least one template unit")
        if self.k > T // R:
            raise MatchError(f"k={self.k} exceeds floor(T/R) = {T // R} (R={R}, T={T})")


def force_include(spec: TemplateMatchSpec, treated_ids: Sequence, penalty: float,
                  table: Optional[CovariateTable] = None) -> TemplateMatchSpec:
    """Penalize every treated unit outside ``treated_ids`` by ``penalty``."""
    if not penalty > 0:
        raise MatchError("forced-inclusion penalty must be positive")
    if table is not None:
        rows = table.index_of(treated_ids)
        bad = [table.unit_ids[i] for i in rows if table.roles[i] != "treated"]
        if bad:
            raise MatchError(f"forced ids are not treated units: {bad}")
    return replace(spec, forced_include=tuple(treated_ids), forced_penalty=float(penalty))


# --------------------------------------------------------------------------
# distances


def compute_distances(
    table: CovariateTable,
    delta_kind: str = "participation_abs_diff",
    Delta_kind: str = "robust_mahalanobis",
    Delta_caliper: Optional[Caliper] = Caliper(0.05),
    delta_caliper: Optional[Caliper] = None,
    propensity: Optional[np.ndarray] = None,
    robust_distance: Optional[np.ndarray] = None,
) -> DistanceMatrices:
    """Template-to-treated and treated-to-control distances for a cohort.

    Defaults: absolute gap in participation score, and robust Mahalanobis on
    all covariates inside a hard 0.05 propensity-score caliper.
    ``propensity`` (full-length) and ``robust_distance`` (treated x control)
    may be supplied to reuse earlier computations.
    """
    K, Tr, Co = table.rows("template"), table.rows("treated"), table.rows("control")
    if len(Tr) == 0 or len(Co) == 0:
        raise DataError("matching needs treated and control units")
    warnings = []
    ps = propensity_scores(table) if propensity is None else np.asarray(propensity, dtype=float)

    if delta_kind == "participation_abs_diff":
        part = participation_scores(table)
        delta = np.abs(part[K][:, None] - part[Tr][None, :])
        d_scores = (part[K], part[Tr])
    elif delta_kind == "mahalanobis_shared":
        pool = table.shared[np.concatenate([K, Tr])]
        delta = mahalanobis_matrix(table.shared[K], table.shared[Tr], pool)
        d_scores = None
    else:
        raise MatchError(f"unknown delta kind {delta_kind!r}; choose from {DELTA_KINDS}")
    if delta_caliper is not None:
        if d_scores is None:
            d_scores = (participation_scores(table)[K], participation_scores(table)[Tr])
        res = apply_caliper(delta, *d_scores, delta_caliper.width, delta_caliper.mode, delta_caliper.penalty_weight)
        delta = res.values
        warnings += [f"template unit {table.unit_ids[K[r]]} has no treated unit inside the caliper" for r in res.empty_rows]

    obs = np.concatenate([Tr, Co])
    if Delta_kind == "robust_mahalanobis" and robust_distance is not None:
        Delta = np.array(robust_distance, dtype=float, copy=True)
    elif Delta_kind == "robust_mahalanobis":
        Delta = robust_mahalanobis_matrix(table.features(Tr), table.features(Co), table.features(obs))
    elif Delta_kind == "mahalanobis":
        Delta = mahalanobis_matrix(table.features(Tr), table.features(Co), table.features(obs))
    elif Delta_kind == "propensity_abs_diff":
        Delta = np.abs(ps[Tr][:, None] - ps[Co][None, :])
    else:
        raise MatchError(f"unknown Delta kind {Delta_kind!r}; choose from {PAIRING_KINDS}")
    if Delta_caliper is not None:
        res = apply_caliper(Delta, ps[Tr], ps[Co], Delta_caliper.width, Delta_caliper.mode, Delta_caliper.penalty_weight)
        Delta = res.values
        warnings += [f"treated unit {table.unit_ids[Tr[t]]} has no control inside the caliper" for t in res.empty_rows]
    return DistanceMatrices(delta, Delta, ps[Tr], ps[Co], tuple(warnings))


def remove_exact_mismatch(dist: DistanceMatrices, table: CovariateTable, columns: Sequence[str]) -> DistanceMatrices:
    """Drop treated-control entries that disagree on any of ``columns``."""
    columns = tuple(columns)
    for col in columns:
        if not table.has_column(col):
            raise DataError(f"unknown exact-match column {col!r}")
    if not columns:
        return dist
    Tr, Co = table.rows("treated"), table.rows("control")
    Delta = np.array(dist.Delta, dtype=float, copy=True)
    for col in columns:
        values = np.asarray(table.column(col))
        Delta[values[Tr][:, None] != values[Co][None, :]] = np.inf
    return dist._replace(Delta=Delta)


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True, eq=False)
class TemplateNetwork:
    net: FlowNetwork
    kinds: np.ndarray
    arc_a: np.ndarray
    arc_b: np.ndarray
    R: int
    T: int
    C: int
    unit_ids: tuple
    template_rows: np.ndarray
    treated_rows: np.ndarray
    control_rows: np.ndarray
    dist: DistanceMatrices
    spec: TemplateMatchSpec
    warnings: tuple = ()
    categories: tuple = ()

    @property
    def source(self) -> int:
        return 0

    @property
    def sink(self) -> int:
        return self.R + 2 * self.T + self.C + 1

    def template_node(self, r: int) -> int:
        return 1 + r

    def treated_node(self, t: int) -> int:
        return 1 + self.R + t

    def treated_copy_node(self, t: int) -> int:
        return 1 + self.R + self.T + t

    def control_node(self, c: int) -> int:
        return 1 + self.R + 2 * self.T + c

    def category_node(self, b: int) -> int:
        return self.sink + 1 + b

    def describe_node(self, node: int) -> tuple:
        """Role-tagged view of a node id, e.g. ``("treated", "T3")``."""
        R, T, C = self.R, self.T, self.C
        ids = self.unit_ids
        if node == 0:
            return ("source", None)
        if node <= R:
            return ("template", ids[self.template_rows[node - 1]])
        if node <= R + T:
            return ("treated", ids[self.treated_rows[node - 1 - R]])
        if node <= R + 2 * T:
            return ("treated_copy", ids[self.treated_rows[node - 1 - R - T]])
        if node <= R + 2 * T + C:
            return ("control", ids[self.control_rows[node - 1 - R - 2 * T]])
        if node == self.sink:
            return ("sink", None)
        return ("category", self.categories[node - self.sink - 1])

    def arc_count(self, kind: int) -> int:
        return int(np.sum(self.kinds == kind))

    def outgoing(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.net.tail == node)


def _scaled(values: np.ndarray, scale: float) -> np.ndarray:
    return np.rint(values * scale).astype(np.int64)


def build_template_network(table: CovariateTable, dist: DistanceMatrices, spec: TemplateMatchSpec) -> TemplateNetwork:
    """Assemble the flow network for one template match."""
    K, Tr, Co = table.rows("template"), table.rows("treated"), table.rows("control")
    R, T, C = len(K), len(Tr), len(Co)
    if T == 0 or C == 0:
        raise MatchError("matching needs treated and control units")
    spec.check_sizes(R, T)
    dist.check(R, T, C)
    if spec.exact_columns:
        dist = remove_exact_mismatch(dist, table, spec.exact_columns)
    Delta = dist.Delta
    if spec.sparsify:
        if dist.treated_scores is None or dist.control_scores is None:
            raise MatchError("sparsification needs propensity scores in the distance matrices")
        gap = np.abs(np.asarray(dist.treated_scores)[:, None] - np.asarray(dist.control_scores)[None, :])
        gap[np.isinf(Delta)] = np.inf
        order = np.argsort(gap, axis=1, kind="stable")
        keep = np.zeros(Delta.shape, dtype=bool)
        np.put_along_axis(keep, order[:, : spec.sparsify], True, axis=1)
        Delta = np.where(keep, Delta, np.inf)
        dist = dist._replace(Delta=Delta)

    forced = np.zeros(T, dtype=np.int64)
    if spec.forced_include:
        rows = table.index_of(spec.forced_include)
        pos = {row: t for t, row in enumerate(Tr)}
        bad = [table.unit_ids[r] for r in rows if r not in pos]
        if bad:
            raise MatchError(f"forced ids are not treated units: {bad}")
        forced[:] = int(round(spec.cost_scale * spec.forced_penalty))
        forced[[pos[r] for r in rows]] = 0

    supply = spec.k * R
    src, snk = 0, R + 2 * T + C + 1
    kap = 1 + np.arange(R)
    tau = 1 + R + np.arange(T)
    taub = 1 + R + T + np.arange(T)
    gam = 1 + R + 2 * T + np.arange(C)

    rr, tt = np.nonzero(~np.isinf(dist.delta))
    t2, cc = np.nonzero(~np.isinf(Delta))
    raw = [dist.delta[rr, tt] * spec.cost_scale, Delta[t2, cc] * (spec.cost_scale * spec.lam),
           np.array([spec.cost_scale * spec.forced_penalty])]
    biggest = max(float(x.max()) for x in raw if x.size)
    if biggest * max(supply, 1) >= MAX_INT_COST:
        raise MatchError("scaled costs overflow the integer range; lower cost_scale")
    delta_cost = _scaled(dist.delta[rr, tt], spec.cost_scale)
    pair_cost = _scaled(Delta[t2, cc], spec.cost_scale * spec.lam)

    parts = [
        (np.full(R, src), kap, np.full(R, spec.k), np.zeros(R, np.int64), SOURCE_TEMPLATE, np.arange(R), np.full(R, -1)),
        (kap[rr], tau[tt], np.ones(len(rr)), delta_cost, TEMPLATE_TREATED, rr, tt),
        (tau, taub, np.ones(T), forced, TREATED_INTERNAL, np.arange(T), np.arange(T)),
        (taub[t2], gam[cc], np.ones(len(t2)), pair_cost, TREATED_CONTROL, t2, cc),
        (gam, np.full(C, snk), np.ones(C), np.zeros(C, np.int64), CONTROL_SINK, np.arange(C), np.full(C, -1)),
    ]
    tail = np.concatenate([p[0] for p in parts])
    head = np.concatenate([p[1] for p in parts])
    cap = np.concatenate([p[2] for p in parts])
    cost = np.concatenate([p[3] for p in parts])
    kinds = np.concatenate([np.full(len(p[0]), p[4], dtype=np.int8) for p in parts])
    arc_a = np.concatenate([p[5] for p in parts]).astype(np.int64)
    arc_b = np.concatenate([p[6] for p in parts]).astype(np.int64)
    net = build_network_arrays(R + 2 * T + C + 2, tail, head, cap, cost, src, snk, supply, labels=kinds)

    warnings = list(dist.warnings)
    ids = table.unit_ids
    for r in np.flatnonzero(np.all(np.isinf(dist.delta), axis=1)):
        warnings.append(f"template unit {ids[K[r]]} has no outgoing arcs")
    for t in np.flatnonzero(np.all(np.isinf(Delta), axis=1)):
        warnings.append(f"treated unit {ids[Tr[t]]} has no admissible control (no outgoing arcs from its copy)")
    tn = TemplateNetwork(net, kinds, arc_a, arc_b, R, T, C, ids, K, Tr, Co, dist, spec, tuple(dict.fromkeys(warnings)))
    if spec.fine_balance is not None:
        fb = spec.fine_balance
        tn = add_fine_balance_layer(tn, table, fb.column, fb.targets, fb.overflow_penalty)
    return tn


def add_fine_balance_layer(
    tn: TemplateNetwork,
    table: CovariateTable,
    column: str,
    target_counts: Mapping[str, int],
    overflow_penalty: float,
) -> TemplateNetwork:
    """Route controls through one node per category of ``column``.

    Each category passes ``target_counts[b]`` units to the sink for free and
    any excess through an overflow arc priced at ``overflow_penalty`` per
    unit, which gives near-fine balance when the targets cannot be met.
    """
    if tn.categories:
        raise MatchError("network already has a fine-balance layer")
    supply = tn.net.supply
    if sum(int(v) for v in target_counts.values()) != supply:
        raise MatchError(f"fine-balance targets sum to {sum(target_counts.values())}, expected k*R = {supply}")
    if any(int(v) < 0 for v in target_counts.values()):
        raise MatchError("fine-balance targets must be non-negative")
    labels = np.asarray(table.column(column)).astype(str)[tn.control_rows]
    categories = tuple(sorted(set(labels) | {str(k) for k in target_counts}))
    index = {b: i for i, b in enumerate(categories)}
    targets = {str(k): int(v) for k, v in target_counts.items()}

    net = tn.net
    head = net.head.copy()
    kinds = tn.kinds.copy()
    arc_b = tn.arc_b.copy()
    to_sink = np.flatnonzero(kinds == CONTROL_SINK)
    cat_of_control = np.array([index[b] for b in labels], dtype=np.int64)
    head[to_sink] = tn.sink + 1 + cat_of_control[tn.arc_a[to_sink]]
    kinds[to_sink] = CONTROL_CATEGORY
    arc_b[to_sink] = cat_of_control[tn.arc_a[to_sink]]

    B = len(categories)
    cat_nodes = tn.sink + 1 + np.arange(B)
    if overflow_penalty < 0:
        raise MatchError("overflow penalty must be >= 0")
    if tn.spec.cost_scale * overflow_penalty * supply >= MAX_INT_COST:
        raise MatchError("scaled overflow penalty exceeds the integer range; lower cost_scale")
    penalty = int(round(tn.spec.cost_scale * overflow_penalty))
    new_tail = np.concatenate([net.tail, cat_nodes, cat_nodes])
    new_head = np.concatenate([head, np.full(2 * B, tn.sink)])
    new_cap = np.concatenate([net.capacity, [targets.get(b, 0) for b in categories], np.full(B, supply)])
    new_cost = np.concatenate([net.cost, np.zeros(B, np.int64), np.full(B, penalty)])
    new_kinds = np.concatenate([kinds, np.full(B, CATEGORY_SINK, np.int8), np.full(B, CATEGORY_OVERFLOW, np.int8)])
    new_a = np.concatenate([tn.arc_a, np.arange(B), np.arange(B)])
    new_b = np.concatenate([arc_b, np.full(2 * B, -1)])
    new_net = build_network_arrays(net.node_count + B, new_tail, new_head, new_cap, new_cost,
                                   net.source, net.sink, supply, labels=new_kinds)
    return replace(tn, net=new_net, kinds=new_kinds, arc_a=new_a, arc_b=new_b, categories=categories)


# --------------------------------------------------------------------------
# solving


@dataclass(frozen=True)
class MatchedSample:
    pairs: tuple
    template_assignment: tuple
    s1_template_cost: float
    s2_pairing_cost: float
    objective: float
    feasible: bool
    k: int = 1
    lam: float = 1.0
    flow_cost: int = 0
    diagnostics: tuple = ()
    warnings: tuple = ()

    @property
    def treated_ids(self) -> list:
        return [t for t, _ in self.pairs]

    @property
    def control_ids(self) -> list:
        return [c for _, c in self.pairs]

    def template_of(self) -> dict:
        return {t: r for r, t in self.template_assignment}


def max_bipartite_size(rows: np.ndarray, cols: np.ndarray, n_rows: int, n_cols: int) -> int:
    if len(rows) == 0:
        return 0
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_rows, n_cols))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return int(np.sum(match >= 0))


def diagnose_infeasibility(tn: TemplateNetwork) -> tuple:
    """Name the layer that cannot carry ``k*R`` units of flow."""
    k, R, T, C = tn.spec.k, tn.R, tn.T, tn.C
    need = k * R
    left = tn.kinds == TEMPLATE_TREATED
    # each template unit may be used k times: replicate its arcs
    lr = np.concatenate([tn.arc_a[left] * k + j for j in range(k)])
    lc = np.concatenate([tn.arc_b[left]] * k)
    left_max = max_bipartite_size(lr, lc, R * k, T)
    right = tn.kinds == TREATED_CONTROL
    right_max = max_bipartite_size(tn.arc_a[right], tn.arc_b[right], T, C)
    out = []
    if left_max < need:
        out.append(f"template->treated layer: at most {left_max} of {need} required units can be routed")
    if right_max < need:
        out.append(f"treated->control layer: at most {right_max} of {need} treated units can be paired with controls")
    if not out:
        out.append("layers are individually feasible but the treated units reachable from the template "
                   "cannot all be paired with controls; loosen the treated->control caliper or exact constraints")
    return tuple(out)


# float64 sums of integer costs stay exact below this bound
EXACT_FLOAT_COST = 2**50
SOLVER_METHODS = ("auto", "flow", "assignment")
# "auto" switches to the assignment form once pairing costs dominate; the
# shortest-path solver is faster when template resemblance drives the match
ASSIGNMENT_COST_RATIO = 20.0


def assignment_solvable(tn: TemplateNetwork) -> bool:
    """True when the network can be solved as a sparse assignment problem."""
    if tn.categories:
        return False
    net = tn.net
    rows = tn.spec.k * tn.R + tn.T
    return int(np.abs(net.cost).max(initial=0)) * 2 * (rows + 1) < EXACT_FLOAT_COST


def prefers_assignment(tn: TemplateNetwork) -> bool:
    if not assignment_solvable(tn):
        return False
    left = tn.net.cost[tn.kinds == TEMPLATE_TREATED]
    right = tn.net.cost[tn.kinds == TREATED_CONTROL]
    if left.size == 0 or right.size == 0:
        return True
    return float(np.median(right)) >= ASSIGNMENT_COST_RATIO * max(float(np.median(left)), 1.0)


def _solve_by_assignment(tn: TemplateNetwork):
    """Min-cost flow on the base network via a rectangular assignment.

    Rows are the ``k*R`` template slots plus one row per treated copy; columns
    are the treated units plus the controls.  A slot takes a treated column
    (template->treated arc); a treated copy row either takes its own column
    (unit left out, cost 0) or a control column (treated->control arc plus the
    treated-internal cost).  Treated copies keep only their ``k*R`` cheapest
    controls: with at most ``k*R - 1`` other pairs one of them is always free,
    so the optimum is unchanged.

    Returns ``(slot arcs, control_of, total_cost)`` or None when infeasible.
    """
    k, R, T, C = tn.spec.k, tn.R, tn.T, tn.C
    S = k * R
    net, kinds = tn.net, tn.kinds
    inner = np.zeros(T, dtype=np.int64)
    e_in = np.flatnonzero(kinds == TREATED_INTERNAL)
    inner[tn.arc_a[e_in]] = net.cost[e_in]
    e_lt = np.flatnonzero(kinds == TEMPLATE_TREATED)
    e_rt = np.flatnonzero(kinds == TREATED_CONTROL)
    rt_cost = net.cost[e_rt] + inner[tn.arc_a[e_rt]]
    # per treated copy keep the S cheapest arcs (ties by control index)
    order = np.lexsort((tn.arc_b[e_rt], rt_cost, tn.arc_a[e_rt]))
    t_sorted = tn.arc_a[e_rt][order]
    first = np.searchsorted(t_sorted, t_sorted, side="left")
    keep = order[np.arange(len(order)) - first < S]
    e_rt, rt_cost = e_rt[keep], rt_cost[keep]

    rows = np.concatenate([tn.arc_a[e_lt] * k + j for j in range(k)] + [S + np.arange(T), S + tn.arc_a[e_rt]])
    cols = np.concatenate([tn.arc_b[e_lt]] * k + [np.arange(T), T + tn.arc_b[e_rt]])
    # +1 keeps every stored weight non-zero; each full matching has S+T edges
    weights = np.concatenate([net.cost[e_lt]] * k + [np.zeros(T, np.int64), rt_cost]).astype(np.float64) + 1.0
    if S + T > T + C:
        return None
    graph = csr_matrix((weights, (rows, cols)), shape=(S + T, T + C))
    try:
        row_ind, col_ind = min_weight_full_bipartite_matching(graph)
    except ValueError:
        return None
    slot = row_ind < S
    slot_arcs = sorted(zip((row_ind[slot] // k).tolist(), col_ind[slot].tolist()))
    chosen = {t for _, t in slot_arcs}
    copy = (row_ind >= S) & (col_ind >= T)
    control_of = {int(r - S): int(c - T) for r, c in zip(row_ind[copy], col_ind[copy]) if int(r - S) in chosen}
    if len(control_of) != len(chosen):
        raise AssertionError("assignment left a selected treated unit unpaired")
    lt_cost = dict(zip(zip(tn.arc_a[e_lt].tolist(), tn.arc_b[e_lt].tolist()), net.cost[e_lt].tolist()))
    rt_lookup = dict(zip(zip(tn.arc_a[e_rt].tolist(), tn.arc_b[e_rt].tolist()), rt_cost.tolist()))
    total = sum(lt_cost[a] for a in slot_arcs) + sum(rt_lookup[(t, c)] for t, c in control_of.items())
    return slot_arcs, control_of, int(total)


def solve_template_match(tn: TemplateNetwork, spec: Optional[TemplateMatchSpec] = None,
                         method: str = "auto") -> MatchedSample:
    """Solve the network and report pairs with the two objective parts.

    ``method`` is "flow" (successive shortest paths on the network),
    "assignment" (equivalent sparse assignment; base network only) or "auto",
    which uses the assignment form when the network allows it and the pairing
    layer's median arc cost is at least ``ASSIGNMENT_COST_RATIO`` times the
    template layer's.  Both reach
    the same optimal integer cost; among tied optima they may pick different
    pairs.

    The reported costs are recomputed from the floating-point distances, so
    they do not carry the integer rounding used inside the solver.
    """
    spec = spec or tn.spec
    if method not in SOLVER_METHODS:
        raise MatchError(f"unknown solver method {method!r}; expected one of {SOLVER_METHODS}")
    if method == "assignment" and not assignment_solvable(tn):
        raise MatchError("assignment solver needs a network without fine balance and moderate costs")
    infeasible = MatchedSample((), (), math.nan, math.nan, math.nan, False, spec.k, spec.lam,
                               diagnostics=(), warnings=tn.warnings)
    if method == "assignment" or (method == "auto" and prefers_assignment(tn)):
        found = _solve_by_assignment(tn)
        if found is None:
            return replace(infeasible, diagnostics=diagnose_infeasibility(tn))
        slot_arcs, control_of, total = found
    else:
        sol = solve_min_cost_flow(tn.net)
        if not sol.feasible:
            return replace(infeasible, diagnostics=diagnose_infeasibility(tn))
        used = sol.flow > 0
        lt = np.flatnonzero(used & (tn.kinds == TEMPLATE_TREATED))
        rt = np.flatnonzero(used & (tn.kinds == TREATED_CONTROL))
        control_of = dict(zip(tn.arc_a[rt].tolist(), tn.arc_b[rt].tolist()))
        slot_arcs = sorted(zip(tn.arc_a[lt].tolist(), tn.arc_b[lt].tolist()))
        total = sol.total_cost
    ids = tn.unit_ids
    pairs, assignment = [], []
    s1 = s2 = 0.0
    for r, t in slot_arcs:
        c = control_of[t]
        assignment.append((ids[tn.template_rows[r]], ids[tn.treated_rows[t]]))
        pairs.append((ids[tn.treated_rows[t]], ids[tn.control_rows[c]]))
        s1 += float(tn.dist.delta[r, t])
        s2 += float(tn.dist.Delta[t, c])
    if len(pairs) != len(control_of):
        raise AssertionError("flow decomposition produced unpaired treated units")
    return MatchedSample(
        tuple(pairs), tuple(assignment), s1, s2, s1 + spec.lam * s2, True, spec.k, spec.lam,
        flow_cost=total, warnings=tn.warnings,
    )


def template_match(table: CovariateTable, spec: TemplateMatchSpec, dist: Optional[DistanceMatrices] = None,
                   delta_kind: str = "participation_abs_diff", Delta_kind: str = "robust_mahalanobis",
                   method: str = "auto") -> MatchedSample:
    """Compute default distances (unless given), build and solve in one call."""
    if dist is None:
        dist = compute_distances(table, delta_kind, Delta_kind, spec.Delta_caliper, spec.delta_caliper)
    return solve_template_match(build_template_network(table, dist, spec), spec, method)


# --------------------------------------------------------------------------
# enumeration (small instances only)


@dataclass(frozen=True)
class CandidateSample:
    """One matched outcome: treated subset with its controls, in treated order."""

    pairs: tuple

    @property
    def treated(self) -> tuple:
        return tuple(t for t, _ in self.pairs)


def count_matched_samples(T: int, C: int, n_pairs: int) -> int:
    if n_pairs > T or n_pairs > C:
        return 0
    return math.comb(T, n_pairs) * math.perm(C, n_pairs)


def enumerate_matched_samples(R: int, T: int, C: int, k: int = 1, limit: int = ENUMERATION_LIMIT) -> list:
    """Every distinct matched outcome of a dense ``k*R``-pair template network.

    An outcome is the selected treated subset together with its injective
    control assignment; template assignments that lead to the same pairs are
    collapsed (see :func:`enumerate_template_assignments`).
    """
    n = k * R
    total = count_matched_samples(T, C, n)
    if total > limit:
        raise MatchError(f"{total} matched samples exceed the enumeration guard ({limit})")
    out = []
    for subset in itertools.combinations(range(T), n):
        for controls in itertools.permutations(range(C), n):
            out.append(CandidateSample(tuple(zip(subset, controls))))
    return out


def enumerate_template_assignments(R: int, k: int, treated: Sequence[int]) -> Iterator[tuple]:
    """All ways to give each template unit exactly ``k`` of the ``treated`` units.

    Yields tuples ``owner`` aligned with ``treated``: ``owner[i]`` is the
    template index that selects ``treated[i]``.
    """
    treated = list(treated)
    if len(treated) != k * R:
        raise MatchError("need exactly k*R treated units")

    def rec(pos: int, used: list) -> Iterator[tuple]:
        if pos == len(treated):
            yield ()
            return
        for r in range(R):
            if used[r] < k:
                used[r] += 1
                for rest in rec(pos + 1, used):
                    yield (r,) + rest
                used[r] -= 1

    yield from rec(0, [0] * R)


__all__ = [
    "ARC_KINDS",
    "CandidateSample",
    "Caliper",
    "FineBalance",
    "MatchError",
    "MatchedSample",
    "TemplateMatchSpec",
    "TemplateNetwork",
    "add_fine_balance_layer",
    "build_template_network",
    "compute_distances",
    "count_matched_samples",
    "diagnose_infeasibility",
    "enumerate_matched_samples",
    "enumerate_template_assignments",
    "force_include",
    "remove_exact_mismatch",
    "SOLVER_METHODS",
    "assignment_solvable",
    "prefers_assignment",
    "solve_template_match",
    "template_match",
]
