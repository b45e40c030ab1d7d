"""Adversarially robust two-stage learning-to-defer.

Library layout: core (cost algebra), losses (surrogate family), scorer
(differentiable models), attacks (inner maximizations), trainer (baseline and
SARD loops), oracle (brute-force consistency checks), bench (data + experiment
orchestration), figures (report plots), cli (command-line surface).
"""

__version__ = "0.1.0"

from .core import (
    AgentPool,
    AgentPrediction,
    AggregatedCosts,
    CostVector,
    Sample,
    aggregate_costs,
    cost_vector,
    true_deferral_loss,
)
from .losses import (
    PairwiseDiffs,
    PsiParams,
    adversarial_true_deferral_loss,
    comp_sum_surrogate,
    deferral_surrogate,
    margin_surrogate_pointwise,
    psi_rho,
    psi_u,
    smooth_surrogate,
)

__all__ = [
    "AgentPool",
    "AgentPrediction",
    "AggregatedCosts",
    "CostVector",
    "PairwiseDiffs",
    "PsiParams",
    "Sample",
    "adversarial_true_deferral_loss",
    "aggregate_costs",
    "comp_sum_surrogate",
    "cost_vector",
    "deferral_surrogate",
    "margin_surrogate_pointwise",
    "psi_rho",
    "psi_u",
    "smooth_surrogate",
    "true_deferral_loss",
]
