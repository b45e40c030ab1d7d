"""The surrogate-loss family for deferral.

Building blocks: the power transform psi_u, the clamp transform psi_rho,
comp-sum multiclass surrogates over rejector scores, their margin variants,
and the smooth robust surrogate that adds a weighted worst-case displacement
of pairwise score differences. The inner suprema are inputs here — this module
stays a pure function layer; all maximization lives in the attacks module.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import AggregatedCosts, CostVector

Array = np.ndarray

# Inner sums are clamped here before powers so u < 1 cannot overflow to inf.
_CLAMP = 1e300


@dataclass(frozen=True)
class PsiParams:
    """Loss-family knobs: exponent u, margin width rho, smooth-term weight nu."""

    u: float
    rho: float = 1.0
    nu: float = 0.0

    def __post_init__(self):
        if not self.u > 0:
            raise ValueError("u must be positive")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.nu < 0:
            raise ValueError("nu must be non-negative")


# Scores are plain float arrays of length J+1: s[j] = r(x, j).
ScoreVector = Array


@dataclass(frozen=True)
class PairwiseDiffs:
    """Score differences (s[j] - s[j'] for j' != j), ordered by increasing j'."""

    delta_bar: Array

    @classmethod
    def from_scores(cls, s: Array, j: int) -> "PairwiseDiffs":
        s = np.asarray(s, dtype=np.float64)
        return cls(np.delete(s[j] - s, j))


@lru_cache(maxsize=None)
def pairwise_diff_matrix(j: int, n_agents: int) -> Array:
    """Matrix M with M @ s = the pairwise-diff vector of agent j (rows: j' ascending)."""
    M = np.zeros((n_agents - 1, n_agents))
    row = 0
    for jp in range(n_agents):
        if jp == j:
            continue
        M[row, j] = 1.0
        M[row, jp] = -1.0
        row += 1
    M.setflags(write=False)
    return M


def _as_scalar_or_array(out: Array, scalar_in: bool):
    return float(out) if scalar_in else out


def psi_u(v, u: float):
    """Monotone transform of the inner sum: log(1+v) at u=1, power form otherwise.

    Non-decreasing, 0 at 0, and 1-Lipschitz on the non-negative axis. Accepts
    scalars or arrays (elementwise).
    """
    if not u > 0:
        raise ValueError("u must be positive")
    scalar_in = np.ndim(v) == 0
    v = np.asarray(v, dtype=np.float64)
    if (v < 0).any():
        raise ValueError("psi_u is defined on non-negative inputs")
    v = np.minimum(v, _CLAMP)
    if u == 1.0:
        out = np.log1p(v)
    else:
        out = ((1.0 + v) ** (1.0 - u) - 1.0) / (1.0 - u)
    return _as_scalar_or_array(out, scalar_in)


def psi_rho(v, rho: float):
    """Clamp transform: 1 at non-positive margin, 0 at margin >= rho, linear between."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    scalar_in = np.ndim(v) == 0
    out = np.clip(1.0 - np.asarray(v, dtype=np.float64) / rho, 0.0, 1.0)
    return _as_scalar_or_array(out, scalar_in)


def comp_sum_surrogate(s: Array, j: int, u: float) -> float:
    """psi_u of the summed exponentials of the negated margins of agent j.

    Computed on a shifted log-sum-exp path at u=1; the inner sum is clamped
    before the power otherwise.
    """
    s = np.asarray(s, dtype=np.float64)
    if not 0 <= j < s.size:
        raise IndexError(f"agent index {j} outside 0..{s.size - 1}")
    d = np.delete(s, j) - s[j]  # competitor minus assigned: -margins
    if d.size == 0:
        return 0.0
    if u == 1.0:
        # log(1 + sum exp(d)) without overflow
        m = max(0.0, float(d.max()))
        return m + np.log(np.exp(-m) + np.exp(d - m).sum())
    with np.errstate(over="ignore"):
        v = float(np.exp(d).sum())
    return psi_u(min(v, _CLAMP), u)


def comp_sum_values(S: Array, u: float) -> Array:
    """comp_sum_surrogate for every (sample, assigned agent) pair of a batch.

    S has shape (n, A); the result L has L[i, j] = the surrogate of row i with
    agent j assigned.
    """
    S = np.asarray(S, dtype=np.float64)
    n, A = S.shape
    D = S[:, None, :] - S[:, :, None]  # D[i, j, k] = s_k - s_j
    offdiag = ~np.eye(A, dtype=bool)
    M = np.where(offdiag, D, -np.inf)  # exclude k == j from the sums
    m = np.maximum(M.max(axis=2), 0.0)
    lse = m + np.log(np.exp(-m) + np.exp(M - m[:, :, None]).sum(axis=2))
    if u == 1.0:
        return lse
    with np.errstate(over="ignore"):
        v = np.expm1(np.minimum(lse, 709.0))
    return psi_u(np.minimum(v, _CLAMP), u)


def comp_sum_grads(S: Array, u: float) -> Array:
    """Score gradients of comp_sum_values: G[i, j, k] = d L[i, j] / d s[i, k]."""
    S = np.asarray(S, dtype=np.float64)
    n, A = S.shape
    D = S[:, None, :] - S[:, :, None]
    offdiag = ~np.eye(A, dtype=bool)
    M = np.where(offdiag, D, -np.inf)
    m = np.maximum(M.max(axis=2), 0.0)
    lse = m + np.log(np.exp(-m) + np.exp(M - m[:, :, None]).sum(axis=2))
    # d psi_u(v)/dv = (1+v)^(-u) for every u, and 1+v = exp(lse):
    # each off-diagonal weight is exp(d_k - u * lse), capped below overflow.
    W = np.where(offdiag, np.exp(np.minimum(M - u * lse[:, :, None], 709.0)), 0.0)
    G = W.copy()
    G[:, np.arange(A), np.arange(A)] = -W.sum(axis=2)
    return G


def margin_surrogate_pointwise(s: Array, j: int, params: PsiParams) -> float:
    """psi_u of the summed margin clamps of agent j; 0 only with margin >= rho everywhere."""
    s = np.asarray(s, dtype=np.float64)
    if not 0 <= j < s.size:
        raise IndexError(f"agent index {j} outside 0..{s.size - 1}")
    margins = s[j] - np.delete(s, j)  # assigned minus competitor
    return psi_u(psi_rho(margins, params.rho).sum(), params.u)


def smooth_surrogate(s_clean: Array, sup_diff_norm: float, j: int,
                     params: PsiParams) -> float:
    """Comp-sum on rho-scaled clean scores plus nu times the worst-case displacement.

    sup_diff_norm is the externally maximized Euclidean displacement of the
    pairwise-diff vector over the perturbation ball (see attacks.smooth_sup).
    """
    if sup_diff_norm < 0:
        raise ValueError("sup_diff_norm must be non-negative")
    s_clean = np.asarray(s_clean, dtype=np.float64)
    return comp_sum_surrogate(s_clean / params.rho, j, params.u) + params.nu * sup_diff_norm


def _tau_array(tau) -> Array:
    if isinstance(tau, AggregatedCosts):
        return tau.tau
    return np.asarray(tau, dtype=np.float64)


def _cost_array(c) -> Array:
    if isinstance(c, CostVector):
        return c.c
    return np.asarray(c, dtype=np.float64)


def deferral_surrogate(tau, per_agent_loss) -> float:
    """Aggregate-cost-weighted sum of per-agent surrogate losses."""
    t = _tau_array(tau)
    losses = np.asarray(per_agent_loss, dtype=np.float64)
    if t.shape != losses.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {losses.shape}")
    return float(t @ losses)


def adversarial_true_deferral_loss(c, tau, worst_case_miss) -> float:
    """Worst-case routed cost over the ball, in complement-sum form.

    worst_case_miss[j] says whether some ball point routes away from agent j
    (ties count as a miss). The value is sum_j tau[j]*miss[j] + (1-J)*sum(c),
    which collapses to the routed agent's cost when routing is robust.
    """
    carr = _cost_array(c)
    t = _tau_array(tau)
    miss = np.asarray(worst_case_miss, dtype=np.float64)
    if not (carr.shape == t.shape == miss.shape):
        raise ValueError("cost, tau, and miss arrays must share a shape")
    J = carr.size - 1
    return float(t @ miss + (1 - J) * carr.sum())
