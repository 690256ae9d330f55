"""Integer minimum-cost flow on small-to-medium directed networks.

The solver is successive shortest augmenting paths with node potentials.
Costs are non-negative integers, so reduced costs stay non-negative and each
shortest-path search is a plain Dijkstra.  The inner loop is compiled with
numba; everything around it is ordinary numpy.

``brute_force_min_cost`` enumerates every integer flow and is only meant to
be an oracle for tiny instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numba
import numpy as np

ORACLE_LIMIT = 10**7


class NetworkError(ValueError):
    """Raised when a network description is malformed."""


@dataclass(frozen=True, eq=False)
class FlowNetwork:
    node_count: int
    tail: np.ndarray
    head: np.ndarray
    capacity: np.ndarray
    cost: np.ndarray
    source: int
    sink: int
    supply: int
    labels: Optional[np.ndarray] = None

    @property
    def arc_count(self) -> int:
        return int(self.tail.shape[0])

    @property
    def arcs(self) -> list[tuple[int, int, int, int, Any]]:
        labels = self.labels if self.labels is not None else [None] * self.arc_count
        return [
            (int(t), int(h), int(c), int(w), lab)
            for t, h, c, w, lab in zip(self.tail, self.head, self.capacity, self.cost, labels)
        ]

    def with_supply(self, supply: int) -> "FlowNetwork":
        return build_network_arrays(
            self.node_count, self.tail, self.head, self.capacity, self.cost,
            self.source, self.sink, supply, labels=self.labels,
        )


@dataclass(frozen=True, eq=False)
class FlowSolution:
    flow: np.ndarray
    total_cost: int
    feasible: bool
    augmentations: int = field(default=0, compare=False)

    def check(self, net: FlowNetwork) -> None:
        """Raise AssertionError unless the flow respects capacities and conservation."""
        check_flow(net, self.flow)


def _frozen(values, dtype=np.int64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


def build_network(
    node_count: int,
    arcs: Iterable[Sequence],
    source: int,
    sink: int,
    supply: int,
) -> FlowNetwork:
    """Build a network from ``(tail, head, capacity, cost[, label])`` tuples."""
    arcs = list(arcs)
    tail, head, cap, cost, labels = [], [], [], [], []
    for i, arc in enumerate(arcs):
        if len(arc) not in (4, 5):
            raise NetworkError(f"arc {i}: expected (tail, head, capacity, cost[, label]), got {arc!r}")
        tail.append(arc[0])
        head.append(arc[1])
        cap.append(arc[2])
        cost.append(arc[3])
        labels.append(arc[4] if len(arc) == 5 else None)
    lab = np.empty(len(labels), dtype=object)
    lab[:] = labels
    return build_network_arrays(node_count, tail, head, cap, cost, source, sink, supply, labels=lab)


def build_network_arrays(
    node_count: int,
    tail,
    head,
    capacity,
    cost,
    source: int,
    sink: int,
    supply: int,
    labels=None,
) -> FlowNetwork:
    """Array form of :func:`build_network`; used for large generated networks."""
    node_count = int(node_count)
    if node_count < 1:
        raise NetworkError("node_count must be positive")
    for name, val in (("capacity", capacity), ("cost", cost)):
        arr = np.asarray(val)
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
                bad = int(np.flatnonzero(~np.isfinite(arr) | (arr != np.round(arr)))[0])
                raise NetworkError(f"arc {bad}: {name} must be a finite integer, got {arr[bad]!r}")
    tail = _frozen(tail)
    head = _frozen(head)
    capacity = _frozen(capacity)
    cost = _frozen(cost)
    m = tail.shape[0]
    if not (head.shape[0] == capacity.shape[0] == cost.shape[0] == m):
        raise NetworkError("arc arrays have different lengths")
    if labels is not None and len(labels) != m:
        raise NetworkError("labels must have one entry per arc")
    if not (0 <= source < node_count) or not (0 <= sink < node_count):
        raise NetworkError(f"source {source} / sink {sink} outside 0..{node_count - 1}")
    if source == sink:
        raise NetworkError("source and sink must differ")
    if supply < 0:
        raise NetworkError(f"supply must be non-negative, got {supply}")

    def first(mask: np.ndarray) -> int:
        return int(np.flatnonzero(mask)[0])

    bad = (tail < 0) | (tail >= node_count) | (head < 0) | (head >= node_count)
    if bad.any():
        i = first(bad)
        raise NetworkError(f"arc {i} ({tail[i]}->{head[i]}): invalid node-id (node_count={node_count})")
    if (tail == head).any():
        i = first(tail == head)
        raise NetworkError(f"arc {i} ({tail[i]}->{head[i]}): self-loop")
    if (capacity < 0).any():
        i = first(capacity < 0)
        raise NetworkError(f"arc {i} ({tail[i]}->{head[i]}): negative capacity {capacity[i]}")
    if (cost < 0).any():
        i = first(cost < 0)
        raise NetworkError(f"arc {i} ({tail[i]}->{head[i]}): negative cost {cost[i]}")
    return FlowNetwork(node_count, tail, head, capacity, cost, int(source), int(sink), int(supply), labels)


def check_flow(net: FlowNetwork, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    assert flow.shape == (net.arc_count,)
    assert np.all(flow >= 0) and np.all(flow <= net.capacity), "capacity violated"
    balance = np.zeros(net.node_count, dtype=np.int64)
    np.add.at(balance, net.tail, flow)
    np.subtract.at(balance, net.head, flow)
    expected = np.zeros(net.node_count, dtype=np.int64)
    expected[net.source] = net.supply
    expected[net.sink] = -net.supply
    assert np.array_equal(balance, expected), "conservation violated"


# --------------------------------------------------------------------------
# compiled kernel


@numba.njit(cache=True)
def _heap_push(keys, vals, size, key, val):
    i = size
    keys[i] = key
    vals[i] = val
    while i > 0:
        p = (i - 1) >> 1
        if keys[p] > keys[i] or (keys[p] == keys[i] and vals[p] > vals[i]):
            keys[p], keys[i] = keys[i], keys[p]
            vals[p], vals[i] = vals[i], vals[p]
            i = p
        else:
            break
    return size + 1


@numba.njit(cache=True)
def _heap_pop(keys, vals, size):
    key = keys[0]
    val = vals[0]
    size -= 1
    keys[0] = keys[size]
    vals[0] = vals[size]
    i = 0
    while True:
        left = 2 * i + 1
        right = left + 1
        best = i
        if left < size and (keys[left] < keys[best] or (keys[left] == keys[best] and vals[left] < vals[best])):
            best = left
        if right < size and (keys[right] < keys[best] or (keys[right] == keys[best] and vals[right] < vals[best])):
            best = right
        if best == i:
            break
        keys[best], keys[i] = keys[i], keys[best]
        vals[best], vals[i] = vals[i], vals[best]
        i = best
    return key, val, size


@numba.njit(cache=True)
def _ssp_kernel(n, tail, head, cap, cost, s, t, supply):
    m = tail.shape[0]
    ostart = np.zeros(n + 1, np.int64)
    istart = np.zeros(n + 1, np.int64)
    for e in range(m):
        ostart[tail[e] + 1] += 1
        istart[head[e] + 1] += 1
    for i in range(n):
        ostart[i + 1] += ostart[i]
        istart[i + 1] += istart[i]
    out = np.empty(m, np.int64)
    fill = ostart[:-1].copy()
    for e in range(m):
        out[fill[tail[e]]] = e
        fill[tail[e]] += 1
    # incoming arcs with positive flow, packed at the front of each node's slot range
    inflow = np.empty(m, np.int64)
    incount = np.zeros(n, np.int64)
    inpos = np.full(m, -1, np.int64)

    flow = np.zeros(m, np.int64)
    pot = np.zeros(n, np.int64)
    INF = np.int64(1) << 62
    dist = np.full(n, INF, np.int64)
    pred = np.full(n, -1, np.int64)
    done = np.zeros(n, np.bool_)
    touched = np.empty(n, np.int64)
    hkeys = np.empty(m + n + 1, np.int64)
    hvals = np.empty(m + n + 1, np.int64)
    excess = np.zeros(n, np.int64)
    excess[s] = supply

    # zero-cost source arcs can be saturated up front without breaking
    # reduced-cost optimality (all potentials start at zero)
    for j in range(ostart[s], ostart[s + 1]):
        e = out[j]
        if excess[s] == 0:
            break
        h = head[e]
        if cost[e] != 0 or h == t or cap[e] == 0:
            continue
        q = min(cap[e], excess[s])
        flow[e] = q
        excess[s] -= q
        excess[h] += q
        inflow[istart[h] + incount[h]] = e
        inpos[e] = incount[h]
        incount[h] += 1

    sent = 0
    augmentations = 0
    while sent < supply:
        src = 0
        while excess[src] == 0 or src == t:
            src += 1
        ntouch = 0
        dist[src] = 0
        touched[ntouch] = src
        ntouch += 1
        size = _heap_push(hkeys, hvals, 0, 0, src)
        while size > 0:
            d, u, size = _heap_pop(hkeys, hvals, size)
            if done[u] or d > dist[u]:
                continue
            done[u] = True
            if u == t:
                break
            pu = pot[u]
            for j in range(ostart[u], ostart[u + 1]):
                e = out[j]
                if flow[e] == cap[e]:
                    continue
                v = head[e]
                if done[v]:
                    continue
                nd = d + cost[e] + pu - pot[v]
                if nd < dist[v]:
                    if dist[v] == INF:
                        touched[ntouch] = v
                        ntouch += 1
                    dist[v] = nd
                    pred[v] = 2 * e
                    size = _heap_push(hkeys, hvals, size, nd, v)
            for j in range(istart[u], istart[u] + incount[u]):
                e = inflow[j]
                v = tail[e]
                if done[v]:
                    continue
                nd = d - cost[e] + pu - pot[v]
                if nd < dist[v]:
                    if dist[v] == INF:
                        touched[ntouch] = v
                        ntouch += 1
                    dist[v] = nd
                    pred[v] = 2 * e + 1
                    size = _heap_push(hkeys, hvals, size, nd, v)
        if not done[t]:
            return flow, False, augmentations
        dt = dist[t]
        for v in range(n):
            pot[v] += dt
        for i in range(ntouch):
            v = touched[i]
            if done[v]:
                pot[v] += dist[v] - dt

        b = excess[src]
        v = t
        while v != src:
            a = pred[v]
            e = a >> 1
            if a & 1:
                r = flow[e]
                v = head[e]
            else:
                r = cap[e] - flow[e]
                v = tail[e]
            if r < b:
                b = r
        v = t
        while v != src:
            a = pred[v]
            e = a >> 1
            h = head[e]
            if a & 1:
                flow[e] -= b
                v = h
                if flow[e] == 0:
                    p = inpos[e]
                    last = inflow[istart[h] + incount[h] - 1]
                    inflow[istart[h] + p] = last
                    inpos[last] = p
                    incount[h] -= 1
                    inpos[e] = -1
            else:
                if flow[e] == 0:
                    inflow[istart[h] + incount[h]] = e
                    inpos[e] = incount[h]
                    incount[h] += 1
                flow[e] += b
                v = tail[e]
        excess[src] -= b
        sent += b
        augmentations += 1
        for i in range(ntouch):
            v = touched[i]
            dist[v] = INF
            pred[v] = -1
            done[v] = False
    return flow, True, augmentations


def solve_min_cost_flow(net: FlowNetwork) -> FlowSolution:
    """Return a minimum-cost flow carrying ``net.supply`` from source to sink.

    Infeasibility is reported through ``feasible=False`` with an all-zero flow.
    Identical networks always produce identical solutions: shortest-path ties
    are settled by the smaller node id, then by the earlier-scanned arc.
    """
    if net.supply == 0 or net.arc_count == 0:
        zero = np.zeros(net.arc_count, dtype=np.int64)
        return FlowSolution(zero, 0, net.supply == 0)
    flow, ok, aug = _ssp_kernel(
        np.int64(net.node_count), net.tail, net.head, net.capacity, net.cost,
        np.int64(net.source), np.int64(net.sink), np.int64(net.supply),
    )
    if not ok:
        return FlowSolution(np.zeros(net.arc_count, dtype=np.int64), 0, False, int(aug))
    flow.setflags(write=False)
    total = int(flow @ net.cost)
    return FlowSolution(flow, total, True, int(aug))


def brute_force_min_cost(net: FlowNetwork, limit: int = ORACLE_LIMIT) -> FlowSolution:
    """Exhaustive minimum over every integer flow assignment (test oracle)."""
    radices = [int(c) + 1 for c in net.capacity]
    total = 1
    for r in radices:
        total *= r
        if total > limit:
            raise NetworkError(f"instance too large for oracle ({total} > {limit} assignments)")
    m = net.arc_count
    incidence = np.zeros((m, net.node_count), dtype=np.int64)
    incidence[np.arange(m), net.tail] += 1
    incidence[np.arange(m), net.head] -= 1
    target = np.zeros(net.node_count, dtype=np.int64)
    target[net.source] = net.supply
    target[net.sink] = -net.supply

    best_cost, best_flow = None, None
    chunk = 1 << 18
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        flows = np.empty((idx.shape[0], m), dtype=np.int64)
        rem = idx
        for j, r in enumerate(radices):
            flows[:, j] = rem % r
            rem = rem // r
        ok = np.all(flows @ incidence == target, axis=1)
        if not ok.any():
            continue
        costs = flows[ok] @ net.cost
        i = int(np.argmin(costs))
        if best_cost is None or costs[i] < best_cost:
            best_cost, best_flow = int(costs[i]), flows[ok][i]
    if m == 0:
        best_cost, best_flow = (0, np.zeros(0, np.int64)) if net.supply == 0 else (None, None)
    if best_cost is None:
        return FlowSolution(np.zeros(m, dtype=np.int64), 0, False)
    return FlowSolution(best_flow, best_cost, True)


# --------------------------------------------------------------------------
# DIMACS debug dump


def to_dimacs(net: FlowNetwork, comment: str | None = None) -> str:
    """Render the network in DIMACS ``min`` format (1-based node ids)."""
    lines = []
    if comment:
        lines.extend(f"c {row}" for row in comment.splitlines())
    lines.append(f"p min {net.node_count} {net.arc_count}")
    if net.supply:
        lines.append(f"n {net.source + 1} {net.supply}")
        lines.append(f"n {net.sink + 1} {-net.supply}")
    lines.extend(
        f"a {t + 1} {h + 1} 0 {c} {w}"
        for t, h, c, w in zip(net.tail.tolist(), net.head.tolist(), net.capacity.tolist(), net.cost.tolist())
    )
    return "\n".join(lines) + "\n"


def write_dimacs(net: FlowNetwork, path: str | Path, comment: str | None = None) -> None:
    Path(path).write_text(to_dimacs(net, comment), encoding="utf-8")


def parse_dimacs(text: str) -> FlowNetwork:
    """Read back a single-source, single-sink file produced by :func:`to_dimacs`."""
    n = None
    supplies: dict[int, int] = {}
    arcs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0] == "c":
            continue
        if parts[0] == "p":
            if parts[1] != "min":
                raise NetworkError(f"line {lineno}: not a min-cost flow problem")
            n = int(parts[2])
        elif parts[0] == "n":
            supplies[int(parts[1]) - 1] = int(parts[2])
        elif parts[0] == "a":
            t, h, low, cap, cost = map(int, parts[1:6])
            if low != 0:
                raise NetworkError(f"line {lineno}: lower bounds are not supported")
            arcs.append((t - 1, h - 1, cap, cost))
        else:
            raise NetworkError(f"line {lineno}: unknown record {parts[0]!r}")
    if n is None:
        raise NetworkError("missing 'p min' header")
    pos = [v for v, b in supplies.items() if b > 0]
    neg = [v for v, b in supplies.items() if b < 0]
    if len(pos) > 1 or len(neg) > 1:
        raise NetworkError("only one source and one sink are supported")
    source = pos[0] if pos else 0
    sink = neg[0] if neg else n - 1
    arr = np.array(arcs, dtype=np.int64).reshape(-1, 4)
    return build_network_arrays(n, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], source, sink, supplies.get(source, 0))


def random_network(rng: np.random.Generator, max_nodes=8, max_arcs=14, max_cap=2, max_cost=9, max_supply=3) -> FlowNetwork:
    """Small random instance for oracle comparisons."""
    n = int(rng.integers(2, max_nodes + 1))
    m = int(rng.integers(1, max_arcs + 1))
    arcs = []
    for _ in range(m):
        t, h = rng.choice(n, size=2, replace=False)
        arcs.append((int(t), int(h), int(rng.integers(0, max_cap + 1)), int(rng.integers(0, max_cost + 1))))
    return build_network(n, arcs, 0, n - 1, int(rng.integers(0, max_supply + 1)))


__all__ = [
    "FlowNetwork",
    "FlowSolution",
    "NetworkError",
    "brute_force_min_cost",
    "build_network",
    "build_network_arrays",
    "check_flow",
    "parse_dimacs",
    "random_network",
    "solve_min_cost_flow",
    "to_dimacs",
    "write_dimacs",
]
