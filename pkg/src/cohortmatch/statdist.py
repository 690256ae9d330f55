"""Cohort data model, score models, distances, calipers and balance statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit
from scipy.stats import rankdata

ROLES = ("template", "treated", "control")
SEPARATION_BOUND = 15.0
SEPARATION_RIDGE = 1e-4
PINV_CUTOFF = 1e-10


class DataError(ValueError):
    """Raised for malformed cohort data or statistical inputs."""


# --------------------------------------------------------------------------
# data model


@dataclass(frozen=True, eq=False)
class CovariateTable:
    """Units of a study cohort, each tagged as template, treated or control.

    ``shared`` holds covariates observed in both the template source and the
    observational data; ``extended`` holds observational-only covariates and
    may be NaN on template rows.  ``categorical`` carries string-valued
    columns used for exact matching and fine balance.
    """

    unit_ids: tuple
    roles: np.ndarray
    shared: np.ndarray
    extended: np.ndarray
    shared_names: tuple
    extended_names: tuple
    categorical: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.unit_ids)
        roles = np.asarray(self.roles, dtype=object)
        shared = np.asarray(self.shared, dtype=float).reshape(n, -1)
        extended = np.asarray(self.extended, dtype=float).reshape(n, -1) if n else np.zeros((0, len(self.extended_names)))
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "roles", roles)
        object.__setattr__(self, "shared", shared)
        object.__setattr__(self, "extended", extended)
        object.__setattr__(self, "shared_names", tuple(self.shared_names))
        object.__setattr__(self, "extended_names", tuple(self.extended_names))
        object.__setattr__(self, "categorical", {k: np.asarray(v, dtype=object) for k, v in self.categorical.items()})
        if roles.shape != (n,):
            raise DataError("roles must have one entry per unit")
        unknown = set(roles.tolist()) - set(ROLES)
        if unknown:
            raise DataError(f"unknown role(s): {sorted(unknown)}")
        if len(set(self.unit_ids)) != n:
            raise DataError("unit ids must be unique")
        if shared.shape[1] != len(self.shared_names) or extended.shape[1] != len(self.extended_names):
            raise DataError("covariate names do not match matrix widths")
        names = list(self.shared_names) + list(self.extended_names) + list(self.categorical)
        if len(set(names)) != len(names):
            raise DataError("covariate names must be unique")
        if np.isnan(shared).any():
            raise DataError("missing values in shared covariates")
        obs = roles != "template"
        if np.isnan(extended[obs]).any():
            raise DataError("missing values in extended covariates of treated/control units")
        for key, col in self.categorical.items():
            if col.shape != (n,):
                raise DataError(f"categorical column {key!r} has the wrong length")
        object.__setattr__(self, "_index", {uid: i for i, uid in enumerate(self.unit_ids)})

    # -- construction helpers ------------------------------------------------

    @classmethod
    def from_groups(
        cls,
        template: np.ndarray,
        treated: np.ndarray,
        control: np.ndarray,
        shared_count: int,
        names: Optional[Sequence[str]] = None,
    ) -> "CovariateTable":
        """Stack role blocks; template rows carry only the first ``shared_count`` columns."""
        template = np.atleast_2d(np.asarray(template, dtype=float))
        treated = np.atleast_2d(np.asarray(treated, dtype=float))
        control = np.atleast_2d(np.asarray(control, dtype=float))
        d = treated.shape[1]
        if control.shape[1] != d or template.shape[1] < shared_count:
            raise DataError("group blocks have inconsistent widths")
        names = list(names) if names is not None else [f"X{j + 1}" for j in range(d)]
        R, T, C = len(template), len(treated), len(control)
        ids = [f"K{i + 1}" for i in range(R)] + [f"T{i + 1}" for i in range(T)] + [f"C{i + 1}" for i in range(C)]
        roles = ["template"] * R + ["treated"] * T + ["control"] * C
        shared = np.vstack([template[:, :shared_count], treated[:, :shared_count], control[:, :shared_count]])
        ext_t = np.full((R, d - shared_count), np.nan)
        extended = np.vstack([ext_t, treated[:, shared_count:], control[:, shared_count:]])
        return cls(tuple(ids), np.array(roles, dtype=object), shared, extended, tuple(names[:shared_count]), tuple(names[shared_count:]))

    # -- access ----------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.unit_ids)

    def rows(self, role: str) -> np.ndarray:
        if role not in ROLES:
            raise DataError(f"unknown role {role!r}")
        return np.flatnonzero(self.roles == role)

    @property
    def counts(self) -> dict:
        return {role: int(np.sum(self.roles == role)) for role in ROLES}

    @property
    def covariate_names(self) -> tuple:
        return self.shared_names + self.extended_names

    def index_of(self, ids: Iterable) -> np.ndarray:
        try:
            return np.array([self._index[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown unit id {exc.args[0]!r}") from None

    def has_column(self, name: str) -> bool:
        return name in self.shared_names or name in self.extended_names or name in self.categorical

    def column(self, name: str) -> np.ndarray:
        if name in self.shared_names:
            return self.shared[:, self.shared_names.index(name)]
        if name in self.extended_names:
            return self.extended[:, self.extended_names.index(name)]
        if name in self.categorical:
            return self.categorical[name]
        raise DataError(f"unknown column {name!r}")

    def features(self, rows: np.ndarray, extended: bool = True) -> np.ndarray:
        """Covariate matrix for ``rows``: shared block, optionally followed by extended."""
        if extended:
            return np.hstack([self.shared[rows], self.extended[rows]])
        return self.shared[rows]


class DistanceMatrices(NamedTuple):
    """Template-to-treated (``delta``) and treated-to-control (``Delta``) costs.

    ``np.inf`` marks an absent entry, i.e. a removed edge.  Propensity scores
    of treated and control units ride along for sparsification.
    """

    delta: np.ndarray
    Delta: np.ndarray
    treated_scores: Optional[np.ndarray] = None
    control_scores: Optional[np.ndarray] = None
    warnings: tuple = ()

    def check(self, R: int, T: int, C: int) -> None:
        if self.delta.shape != (R, T):
            raise DataError(f"delta has shape {self.delta.shape}, expected {(R, T)}")
        if self.Delta.shape != (T, C):
            raise DataError(f"Delta has shape {self.Delta.shape}, expected {(T, C)}")
        for name, mat in (("delta", self.delta), ("Delta", self.Delta)):
            present = mat[~np.isinf(mat)]
            if np.isnan(mat).any() or (present < 0).any() or np.isneginf(mat).any():
                raise DataError(f"{name} entries must be non-negative reals or +inf")

    def empty_template_rows(self) -> np.ndarray:
        return np.flatnonzero(np.all(np.isinf(self.delta), axis=1))


# --------------------------------------------------------------------------
# logistic regression


@dataclass(frozen=True)
class LogisticModel:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    regularized: bool = False
    ridge: float = 0.0

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    def linear_predictor(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float).reshape(len(features), -1)
        return self.coefficients[0] + features @ self.coefficients[1:]

    def predict(self, features: np.ndarray) -> np.ndarray:
        return expit(self.linear_predictor(features))


def _penalized_loglik(X, y, beta, penalty):
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.sum(penalty * beta**2))


def _irls(X, y, penalty, max_iter, tol, watch_separation):
    beta = np.zeros(X.shape[1])
    ll = _penalized_loglik(X, y, beta, penalty)
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        score = X.T @ (y - p) - penalty * beta
        w = p * (1.0 - p)
        hess = (X * w[:, None]).T @ X + np.diag(penalty)
        step = np.linalg.lstsq(hess, score, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            cand_ll = _penalized_loglik(X, y, cand, penalty)
            if cand_ll >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, cand_ll
        if watch_separation and np.max(np.abs(beta)) > SEPARATION_BOUND:
            return beta, False, it, True
        p = expit(X @ beta)
        resid = X.T @ (y - p) - penalty * beta
        if np.max(np.abs(resid)) < tol:
            return beta, True, it, False
    return beta, False, max_iter, False


def fit_logistic(features, labels, max_iter: int = 100, tol: float = 1e-8) -> LogisticModel:
    """Fit intercept plus slopes by iteratively reweighted least squares.

    When an iterate has a coefficient above 15 in magnitude the data are
    treated as (quasi-)separated and the model is refit with a 1e-4 ridge
    penalty on the slopes; the result is marked ``regularized``.
    """
    y = np.asarray(labels, dtype=float).reshape(-1)
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] != y.shape[0]:
        raise DataError(f"features have {features.shape[0]} rows but labels have {y.shape[0]}")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be binary 0/1")
    if y.min() == y.max():
        raise DataError("labels contain a single class")
    X = np.column_stack([np.ones(len(y)), features])
    penalty = np.zeros(X.shape[1])
    beta, converged, iterations, separated = _irls(X, y, penalty, max_iter, tol, watch_separation=True)
    if not separated:
        return LogisticModel(beta, converged, iterations)
    penalty[1:] = SEPARATION_RIDGE
    beta, converged, more, _ = _irls(X, y, penalty, max_iter, tol, watch_separation=False)
    return LogisticModel(beta, converged, iterations + more, regularized=True, ridge=SEPARATION_RIDGE)


def propensity_scores(table: CovariateTable, model_out: Optional[list] = None) -> np.ndarray:
    """Fitted P(treated | all covariates) for treated and control rows.

    Returns a vector over all rows of ``table``; template rows are NaN.
    """
    rows = np.flatnonzero(table.roles != "template")
    if not (table.roles[rows] == "treated").any() or not (table.roles[rows] == "control").any():
        raise DataError("propensity model needs treated and control units")
    z = (table.roles[rows] == "treated").astype(float)
    model = fit_logistic(table.features(rows), z)
    if model_out is not None:
        model_out.append(model)
    out = np.full(len(table), np.nan)
    out[rows] = model.predict(table.features(rows))
    return out


def participation_scores(table: CovariateTable, model_out: Optional[list] = None) -> np.ndarray:
    """Fitted P(template | shared covariates) for template and treated rows.

    This is the generalizability score; control rows are NaN.
    """
    rows = np.flatnonzero(table.roles != "control")
    if not (table.roles[rows] == "template").any() or not (table.roles[rows] == "treated").any():
        raise DataError("participation model needs template and treated units")
    s = (table.roles[rows] == "template").astype(float)
    model = fit_logistic(table.features(rows, extended=False), s)
    if model_out is not None:
        model_out.append(model)
    out = np.full(len(table), np.nan)
    out[rows] = model.predict(table.features(rows, extended=False))
    return out


# --------------------------------------------------------------------------
# distances


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _whitener(cov: np.ndarray) -> np.ndarray:
    """Columns W with W @ W.T equal to the pseudo-inverse of ``cov``."""
    vals, vecs = np.linalg.eigh(cov)
    top = vals.max() if vals.size else 0.0
    keep = vals > PINV_CUTOFF * top if top > 0 else np.zeros(vals.shape, bool)
    return vecs[:, keep] / np.sqrt(vals[keep])


def mahalanobis_matrix(rows_A, rows_B, covariance_from) -> np.ndarray:
    """Squared Mahalanobis distance between every row of A and every row of B."""
    A, B, P = _as_matrix(rows_A), _as_matrix(rows_B), _as_matrix(covariance_from)
    if not (A.shape[1] == B.shape[1] == P.shape[1]):
        raise DataError(f"column mismatch: {A.shape[1]}, {B.shape[1]}, {P.shape[1]}")
    if P.shape[0] < 2:
        raise DataError("covariance needs at least two rows")
    W = _whitener(np.atleast_2d(np.cov(P, rowvar=False)))
    return cdist(A @ W, B @ W, "sqeuclidean")


def _midranks(values: np.ndarray, pool_sorted: np.ndarray) -> np.ndarray:
    lo = np.searchsorted(pool_sorted, values, side="left")
    hi = np.searchsorted(pool_sorted, values, side="right")
    return lo + (hi - lo + 1) / 2.0


def robust_mahalanobis_matrix(rows_A, rows_B, covariance_from) -> np.ndarray:
    """Rank-based squared Mahalanobis distance.

    Every column is replaced by mid-ranks within the pooled rows, the rank
    covariance has its diagonal inflated back to the variance of untied ranks
    (so heavily tied columns lose weight), and distances use its
    pseudo-inverse.  Rows of A and B are ranked against the pool.
    """
    A, B, P = _as_matrix(rows_A), _as_matrix(rows_B), _as_matrix(covariance_from)
    if not (A.shape[1] == B.shape[1] == P.shape[1]):
        raise DataError(f"column mismatch: {A.shape[1]}, {B.shape[1]}, {P.shape[1]}")
    n = P.shape[0]
    if n < 2:
        raise DataError("covariance needs at least two rows")
    pool = np.sort(P, axis=0)
    rank_P = rankdata(P, axis=0, method="average")
    rank_A = np.column_stack([_midranks(A[:, j], pool[:, j]) for j in range(P.shape[1])])
    rank_B = np.column_stack([_midranks(B[:, j], pool[:, j]) for j in range(P.shape[1])])
    cov = np.atleast_2d(np.cov(rank_P, rowvar=False))
    untied = n * (n + 1) / 12.0  # sample variance of 1..n
    diag = np.diag(cov)
    ratio = np.where(diag > 0, np.sqrt(untied / np.where(diag > 0, diag, 1.0)), 1.0)
    cov = ratio[:, None] * cov * ratio[None, :]
    W = _whitener(cov)
    return cdist(rank_A @ W, rank_B @ W, "sqeuclidean")


class CaliperResult(NamedTuple):
    values: np.ndarray
    empty_rows: tuple


def apply_caliper(
    distances,
    score_A,
    score_B,
    width: float,
    mode: str = "hard",
    penalty_weight: float = 1000.0,
) -> CaliperResult:
    """Restrict a distance block to pairs whose score gap is within ``width``.

    Hard mode marks out-of-caliper entries absent (``inf``); penalty mode adds
    ``penalty_weight * (gap - width)``.  Rows left without any present entry
    are listed in ``empty_rows``.
    """
    D = np.array(distances, dtype=float, copy=True)
    a = np.asarray(score_A, dtype=float).reshape(-1)
    b = np.asarray(score_B, dtype=float).reshape(-1)
    if D.shape != (a.size, b.size):
        raise DataError(f"scores ({a.size}, {b.size}) do not align with matrix {D.shape}")
    if not width > 0:
        raise DataError("caliper width must be positive")
    gap = np.abs(a[:, None] - b[None, :])
    outside = gap > width
    if mode == "hard":
        D[outside] = np.inf
    elif mode == "penalty":
        D[outside] += penalty_weight * (gap[outside] - width)
    else:
        raise DataError(f"unknown caliper mode {mode!r}")
    empty = tuple(int(i) for i in np.flatnonzero(np.all(np.isinf(D), axis=1))) if D.shape[1] else tuple(range(D.shape[0]))
    return CaliperResult(D, empty)


def wasserstein_1d(sample_A, sample_B) -> float:
    """First-order Wasserstein distance between two empirical distributions.

    Integrates the absolute gap between the two empirical quantile functions
    over the merged grid of their jump points.
    """
    a = np.sort(np.asarray(sample_A, dtype=float).reshape(-1))
    b = np.sort(np.asarray(sample_B, dtype=float).reshape(-1))
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise DataError("wasserstein_1d needs non-empty samples")
    # jump points of both quantile functions on the integer grid 0..n*m
    cuts = np.union1d(np.arange(1, n + 1) * m, np.arange(1, m + 1) * n)
    widths = np.diff(np.concatenate([[0], cuts]))
    ia = (cuts + m - 1) // m - 1
    ib = (cuts + n - 1) // n - 1
    return float(np.sum(widths * np.abs(a[ia] - b[ib])) / (n * m))


# --------------------------------------------------------------------------
# balance


@dataclass(frozen=True)
class BalanceRecord:
    name: str
    mean_a: float
    mean_b: float
    pooled_sd: float
    smd: float
    degenerate: bool = False


@dataclass(frozen=True)
class BalanceReport:
    records: tuple
    group_a: str = "A"
    group_b: str = "B"

    def smd(self, name: str) -> float:
        for rec in self.records:
            if rec.name == name:
                return rec.smd
        raise KeyError(name)

    def __getitem__(self, name: str) -> BalanceRecord:
        for rec in self.records:
            if rec.name == name:
                return rec
        raise KeyError(name)

    @property
    def names(self) -> tuple:
        return tuple(rec.name for rec in self.records)

    def max_abs_smd(self) -> float:
        return max((abs(r.smd) for r in self.records if not r.degenerate), default=0.0)


def _var(x: np.ndarray) -> float:
    return float(np.var(x, ddof=1)) if x.size > 1 else 0.0


def standardized_mean_differences(
    table: CovariateTable,
    group_A: Sequence,
    group_B: Sequence,
    covariates: Optional[Sequence[str]] = None,
    labels: tuple = ("A", "B"),
) -> BalanceReport:
    """Per-covariate (mean_A - mean_B) / sqrt((var_A + var_B) / 2)."""
    ia, ib = table.index_of(group_A), table.index_of(group_B)
    if ia.size == 0 or ib.size == 0:
        raise DataError("balance groups must be non-empty")
    names = table.covariate_names if covariates is None else tuple(covariates)
    records = []
    for name in names:
        col = np.asarray(table.column(name), dtype=float)
        xa, xb = col[ia], col[ib]
        if np.isnan(xa).any() or np.isnan(xb).any():
            raise DataError(f"covariate {name!r} is missing for some units in the comparison")
        ma, mb = float(xa.mean()), float(xb.mean())
        sd = math.sqrt((_var(xa) + _var(xb)) / 2.0)
        if sd > 0:
            records.append(BalanceRecord(name, ma, mb, sd, (ma - mb) / sd))
        elif ma == mb:
            records.append(BalanceRecord(name, ma, mb, sd, 0.0))
        else:
            records.append(BalanceRecord(name, ma, mb, sd, math.nan, degenerate=True))
    return BalanceReport(tuple(records), *labels)


__all__ = [
    "BalanceRecord",
    "BalanceReport",
    "CaliperResult",
    "CovariateTable",
    "DataError",
    "DistanceMatrices",
    "LogisticModel",
    "apply_caliper",
    "fit_logistic",
    "mahalanobis_matrix",
    "participation_scores",
    "propensity_scores",
    "robust_mahalanobis_matrix",
    "standardized_mean_differences",
    "wasserstein_1d",
]
