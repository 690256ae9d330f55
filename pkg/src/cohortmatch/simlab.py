"""Factorial simulation: bias of matched difference-in-means against a target ATE.

Data-generating process per replicate:

* template: ``R`` draws of 5 shared covariates, mean (0.25, 0, 0, 0, 0), identity covariance;
* treated / control: ``d`` covariates, mean (theta * Z, 0, ..., 0), identity covariance;
* Y(0) = X'nu + N(0, 1) with every entry of nu equal to the scalar ``nu``;
* Y(1) = Y(0) + beta(X1), beta one of 2, 2 - 0.2 X1, 2 - X1.

Matches depend only on covariates, so within a replicate they are computed
once per (d, theta) and reused for every (nu, effect) cell; covariates are
drawn before the outcome noise so the noise stream is shared too.

The full-treated-group comparison ("M_opt") uses
:func:`cohortmatch.pairmatch.match_baseline_mopt`, a penalized-caliper
optimal pair match, rather than an earthmover-distance design.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from cohortmatch.pairmatch import match_baseline_mopt
from cohortmatch.statdist import CovariateTable, propensity_scores, robust_mahalanobis_matrix
from cohortmatch.templatematch import (
    Caliper,
    MatchedSample,
    MatchError,
    TemplateMatchSpec,
    compute_distances,
    template_match,
)

WORKERS_ENV = "COHORTMATCH_WORKERS"
SHARED_COUNT = 5
TEMPLATE_MEAN_X1 = 0.25

# beta(X1) = a - b * X1
EFFECTS = {"constant": (2.0, 0.0), "mild": (2.0, 0.2), "strong": (2.0, 1.0)}

CSV_COLUMNS = (
    "d", "theta", "nu", "effect", "algorithm", "k", "lambda", "replicates",
    "mean_estimate", "ate_target", "percent_bias", "mc_se", "infeasible",
)


class SimError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Algorithm:
    name: str
    k: int = 0
    lam: float = 0.0

    def __post_init__(self):
        if self.name not in ("M_opt", "M_template"):
            raise SimError(f"unknown algorithm {self.name!r}")
        if self.name == "M_template" and (self.k < 1 or not self.lam > 0):
            raise SimError("M_template needs k >= 1 and lambda > 0")

    @property
    def label(self) -> str:
        return "M_opt" if self.name == "M_opt" else f"M_template:{self.k}:{self.lam:g}"

    @classmethod
    def parse(cls, token: str) -> list:
        """``M_opt``, ``M_template`` (all six defaults) or ``M_template:k:lambda``."""
        token = token.strip()
        if token == "M_opt":
            return [cls("M_opt")]
        if token == "M_template":
            return [a for a in DEFAULT_ALGORITHMS if a.name == "M_template"]
        m = re.fullmatch(r"M_template:(\d+):([0-9.eE+-]+)", token)
        if not m:
            raise SimError(f"cannot parse algorithm {token!r}")
        return [cls("M_template", int(m.group(1)), float(m.group(2)))]


DEFAULT_ALGORITHMS = (Algorithm("M_opt"),) + tuple(
    Algorithm("M_template", k, lam) for k in (1, 2) for lam in (0.01, 1.0, 100.0)
)


@dataclass(frozen=True)
class SimConfig:
    d: int = 10
    theta: float = 0.5
    nu: float = 0.0
    effect: str = "strong"
    sizes: tuple = (300, 1000, 3000)
    replicates: int = 200
    master_seed: int = 20240601
    algorithms: tuple = DEFAULT_ALGORITHMS

    def __post_init__(self):
        if self.d < SHARED_COUNT:
            raise SimError(f"d must be at least {SHARED_COUNT}")
        if self.effect not in EFFECTS:
            raise SimError(f"unknown effect {self.effect!r}; choose from {sorted(EFFECTS)}")
        if len(self.sizes) != 3 or min(self.sizes) < 1:
            raise SimError("sizes must be three positive counts (template, treated, control)")
        if self.replicates < 1:
            raise SimError("replicates must be positive")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "algorithms", tuple(self.algorithms))


@dataclass(frozen=True)
class SimGrid:
    d_values: tuple = (10,)
    thetas: tuple = (0.5,)
    nus: tuple = (0.0,)
    effects: tuple = ("constant", "mild", "strong")
    sizes: tuple = (300, 1000, 3000)
    replicates: int = 200
    master_seed: int = 20240601
    algorithms: tuple = DEFAULT_ALGORITHMS
    caliper: float = 0.05

    def __post_init__(self):
        for name in ("d_values", "thetas", "nus", "effects", "algorithms"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            if not getattr(self, name):
                raise SimError("no algorithms configured" if name == "algorithms" else f"empty grid axis {name}")
        if len(set(self.algorithms)) != len(self.algorithms):
            raise SimError("duplicate algorithms in grid")
        self.configs()  # validates every cell

    def configs(self) -> list:
        return [
            SimConfig(d, theta, nu, effect, self.sizes, self.replicates, self.master_seed, self.algorithms)
            for d, theta, nu, effect in itertools.product(self.d_values, self.thetas, self.nus, self.effects)
        ]

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "SimGrid":
        """Build a grid from string settings (as read from a ``key = value`` file)."""

        def floats(key):
            return tuple(float(v) for v in _split(values[key]))

        kw = {}
        try:
            if "d" in values:
                kw["d_values"] = tuple(int(v) for v in _split(values["d"]))
            if "theta" in values:
                kw["thetas"] = floats("theta")
            if "nu" in values:
                kw["nus"] = floats("nu")
            if "effect" in values:
                kw["effects"] = tuple(_split(values["effect"]))
            if "sizes" in values:
                kw["sizes"] = tuple(int(v) for v in _split(values["sizes"]))
            if "replicates" in values:
                kw["replicates"] = int(values["replicates"])
            if "seed" in values:
                kw["master_seed"] = int(values["seed"])
            if "caliper" in values:
                kw["caliper"] = float(values["caliper"])
        except ValueError as exc:
            raise SimError(f"bad grid value: {exc}") from None
        if "algorithms" in values:
            kw["algorithms"] = tuple(a for tok in _split(values["algorithms"]) for a in Algorithm.parse(tok))
        unknown = set(values) - {"d", "theta", "nu", "effect", "sizes", "replicates", "seed", "caliper", "algorithms"}
        if unknown:
            raise SimError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**kw)


def _split(text: str) -> list:
    return [v.strip() for v in str(text).split(",") if v.strip()]


# --------------------------------------------------------------------------
# data generation


def replicate_seed(master_seed: int, replicate_index: int) -> np.random.SeedSequence:
    """Stream for one replicate; depends only on the two integers, not on run order."""
    return np.random.SeedSequence([int(master_seed), int(replicate_index)])


@dataclass(frozen=True, eq=False)
class Draw:
    """Covariates and outcome noise of one replicate (shared across nu and effect)."""

    table: CovariateTable
    X: np.ndarray
    noise: np.ndarray


def draw_covariates(d: int, theta: float, sizes: Sequence[int], master_seed: int, replicate_index: int) -> Draw:
    R, T, C = sizes
    rng = np.random.default_rng(replicate_seed(master_seed, replicate_index))
    template = rng.standard_normal((R, SHARED_COUNT))
    template[:, 0] += TEMPLATE_MEAN_X1
    treated = rng.standard_normal((T, d))
    treated[:, 0] += theta
    control = rng.standard_normal((C, d))
    noise = rng.standard_normal(T + C)
    table = CovariateTable.from_groups(template, treated, control, SHARED_COUNT)
    return Draw(table, np.vstack([treated, control]), noise)


def beta(effect: str, x1: np.ndarray) -> np.ndarray:
    a, b = EFFECTS[effect]
    return a - b * np.asarray(x1, dtype=float)


def potential_outcomes(draw: Draw, nu: float, effect: str) -> tuple:
    """Full-length Y(0), Y(1) aligned with the table rows; NaN on template rows."""
    table = draw.table
    obs = np.concatenate([table.rows("treated"), table.rows("control")])
    y0 = np.full(len(table), np.nan)
    y0[obs] = draw.X @ np.full(draw.X.shape[1], nu) + draw.noise
    y1 = y0.copy()
    y1[obs] = y0[obs] + beta(effect, draw.X[:, 0])
    return y0, y1


def generate_population(cfg: SimConfig, replicate_index: int) -> tuple:
    """(table, Y(0), Y(1)) for one replicate of ``cfg``."""
    draw = draw_covariates(cfg.d, cfg.theta, cfg.sizes, cfg.master_seed, replicate_index)
    y0, y1 = potential_outcomes(draw, cfg.nu, cfg.effect)
    return draw.table, y0, y1


def ate_target(effect: str) -> float:
    """E[beta(X1)] for X1 ~ Normal(0.25, 1)."""
    if effect not in EFFECTS:
        raise SimError(f"unknown effect {effect!r}")
    a, b = EFFECTS[effect]
    return a - b * TEMPLATE_MEAN_X1


def difference_in_means(sample: MatchedSample, outcomes, table: Optional[CovariateTable] = None) -> float:
    """Mean over pairs of Y_treated - Y_control.

    ``outcomes`` is either a mapping id -> observed outcome, or a
    ``(y0, y1)`` pair of full-length arrays aligned with ``table``.
    """
    if not sample.feasible or not sample.pairs:
        raise SimError("difference in means needs a non-empty feasible sample")
    if isinstance(outcomes, Mapping):
        diffs = [outcomes[t] - outcomes[c] for t, c in sample.pairs]
        return float(np.mean(diffs))
    if table is None:
        raise SimError("array outcomes need the table to resolve ids")
    y0, y1 = outcomes
    t = table.index_of(sample.treated_ids)
    c = table.index_of(sample.control_ids)
    return float(np.mean(y1[t] - y0[c]))


# --------------------------------------------------------------------------
# running


def match_replicate(draw: Draw, algorithms: Sequence[Algorithm], caliper: float = 0.05) -> dict:
    """Matched (treated rows, control rows) per algorithm; None when infeasible."""
    table = draw.table
    Tr, Co = table.rows("treated"), table.rows("control")
    ps = propensity_scores(table)
    obs = np.concatenate([Tr, Co])
    raw = robust_mahalanobis_matrix(table.features(Tr), table.features(Co), table.features(obs))
    out = {}
    dist = None
    for alg in algorithms:
        try:
            if alg.name == "M_opt":
                m = match_baseline_mopt(table, caliper, distance=raw, propensity=ps)
            else:
                if dist is None:
                    dist = compute_distances(table, Delta_caliper=Caliper(caliper), robust_distance=raw, propensity=ps)
                spec = TemplateMatchSpec(k=alg.k, lam=alg.lam, Delta_caliper=Caliper(caliper))
                m = template_match(table, spec, dist=dist)
        except MatchError:
            m = None
        if m is None or not m.feasible:
            out[alg] = None
        else:
            out[alg] = (table.index_of(m.treated_ids), table.index_of(m.control_ids))
    return out


def _replicate_task(args) -> dict:
    d, theta, sizes, seed, rep, nus, effects, algorithms, caliper = args
    draw = draw_covariates(d, theta, sizes, seed, rep)
    matches = match_replicate(draw, algorithms, caliper)
    est = {}
    for nu in nus:
        for effect in effects:
            y0, y1 = potential_outcomes(draw, nu, effect)
            for alg, rows in matches.items():
                est[(nu, effect, alg)] = math.nan if rows is None else float(np.mean(y1[rows[0]] - y0[rows[1]]))
    return est


@dataclass(frozen=True)
class BiasRecord:
    d: int
    theta: float
    nu: float
    effect: str
    algorithm: str
    k: int
    lam: float
    replicates: int
    mean_estimate: float
    ate_target: float
    percent_bias: float
    mc_se: float
    infeasible: int = 0


@dataclass(frozen=True)
class BiasReport:
    """Per-cell, per-algorithm bias summary.

    ``percent_bias`` is ``100 * (mean estimate - target) / target``; ``mc_se``
    is its Monte-Carlo standard error in the same percent units.
    """

    records: tuple
    master_seed: int = 0
    notes: tuple = field(default=())

    def find(self, **where) -> list:
        return [r for r in self.records if all(getattr(r, k) == v for k, v in where.items())]

    def get(self, **where) -> BiasRecord:
        hits = self.find(**where)
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} records match {where}")
        return hits[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([
                r.d, _fmt(r.theta), _fmt(r.nu), r.effect, r.algorithm, r.k if r.k else "",
                _fmt(r.lam) if r.k else "", r.replicates, _fmt(r.mean_estimate), _fmt(r.ate_target),
                _fmt(r.percent_bias), _fmt(r.mc_se), r.infeasible,
            ])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else format(x, ".10g")


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise SimError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def run_factorial(grid: SimGrid, workers: Optional[int] = None, progress=None) -> BiasReport:
    """Run every (d, theta) x replicate, then aggregate all (nu, effect) cells.

    Results do not depend on ``workers``: each replicate draws from its own
    seed stream and aggregation follows a fixed order.
    """
    workers = worker_count() if workers is None else max(1, int(workers))
    tasks = [
        (d, theta, grid.sizes, grid.master_seed, rep, grid.nus, grid.effects, grid.algorithms, grid.caliper)
        for d in grid.d_values for theta in grid.thetas for rep in range(grid.replicates)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=1))
    else:
        results = []
        for i, task in enumerate(tasks):
            results.append(_replicate_task(task))
            if progress is not None:
                progress(i + 1, len(tasks))

    records = []
    per_dt = grid.replicates
    for block, (d, theta) in enumerate(itertools.product(grid.d_values, grid.thetas)):
        chunk = results[block * per_dt : (block + 1) * per_dt]
        for nu in grid.nus:
            for effect in grid.effects:
                target = ate_target(effect)
                for alg in grid.algorithms:
                    est = np.array([res[(nu, effect, alg)] for res in chunk])
                    ok = est[~np.isnan(est)]
                    n = len(ok)
                    mean = float(ok.mean()) if n else math.nan
                    se = float(ok.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
                    records.append(BiasRecord(
                        d, theta, nu, effect, alg.name, alg.k, alg.lam, n, mean, target,
                        100.0 * (mean - target) / target, 100.0 * se / abs(target), len(est) - n,
                    ))
    return BiasReport(tuple(records), grid.master_seed)


__all__ = [
    "Algorithm",
    "BiasRecord",
    "BiasReport",
    "DEFAULT_ALGORITHMS",
    "SimConfig",
    "SimGrid",
    "ate_target",
    "difference_in_means",
    "draw_covariates",
    "generate_population",
    "match_replicate",
    "potential_outcomes",
    "run_factorial",
]
