"""Template-guided matched-pair design for observational cohorts.

The package builds the tripartite minimum-cost flow network that selects
treated units resembling a template sample while pairing them closely with
controls, plus the supporting score models, distances, balance diagnostics
and a simulation harness.
"""

from cohortmatch.flownet import (
    FlowNetwork,
    FlowSolution,
    NetworkError,
    brute_force_min_cost,
    build_network,
    solve_min_cost_flow,
)
from cohortmatch.statdist import (
    BalanceReport,
    CovariateTable,
    DistanceMatrices,
    LogisticModel,
    fit_logistic,
    mahalanobis_matrix,
    participation_scores,
    propensity_scores,
    robust_mahalanobis_matrix,
    standardized_mean_differences,
    wasserstein_1d,
)
from cohortmatch.templatematch import (
    MatchedSample,
    TemplateMatchSpec,
    TemplateNetwork,
    build_template_network,
    solve_template_match,
)

__version__ = "0.1.0"

__all__ = [
    "BalanceReport",
    "CovariateTable",
    "DistanceMatrices",
    "FlowNetwork",
    "FlowSolution",
    "LogisticModel",
    "MatchedSample",
    "NetworkError",
    "TemplateMatchSpec",
    "TemplateNetwork",
    "brute_force_min_cost",
    "build_network",
    "build_template_network",
    "fit_logistic",
    "mahalanobis_matrix",
    "participation_scores",
    "propensity_scores",
    "robust_mahalanobis_matrix",
    "solve_min_cost_flow",
    "solve_template_match",
    "standardized_mean_differences",
    "wasserstein_1d",
]
