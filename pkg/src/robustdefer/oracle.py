"""Brute-force ground truth on finite instances.

Perturbation balls are explicit finite point sets, rejectors are score tables
over every ball point, so adversarial suprema and routing infima are exact by
enumeration. On top of that sit numerical checks of the excess-risk comparison
inequalities: the exact side is enumerated, the surrogate-infimum side is
estimated by grid search plus coordinate descent. The search can only
overestimate an infimum, which shrinks the right-hand side, so a passing check
is sound; a failing one is retried on a wider grid and otherwise reported
inconclusive rather than counted as a violation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import PsiParams, margin_surrogate_pointwise, psi_rho, psi_u

Array = np.ndarray


@dataclass(frozen=True)
class FiniteProblem:
    """A finite instance: per point, an agent distribution, costs, and a ball size.

    probs rows are the conditional weights over agents; costs rows the per-agent
    assignment costs; ball_sizes[i] counts the enumerated perturbations of point
    i, center included. The point marginal is uniform.
    """

    probs: Array
    costs: Array
    ball_sizes: tuple

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        costs = np.asarray(self.costs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape != costs.shape:
            raise ValueError("probs and costs must be matching (points, agents) arrays")
        if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("probability rows must sum to 1")
        if (probs < 0).any() or (costs < 0).any():
            raise ValueError("probabilities and costs must be non-negative")
        sizes = tuple(int(b) for b in self.ball_sizes)
        if len(sizes) != probs.shape[0] or any(b < 1 for b in sizes):
            raise ValueError("need one ball size >= 1 per point")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "ball_sizes", sizes)

    @property
    def n_points(self) -> int:
        return self.probs.shape[0]

    @property
    def n_agents(self) -> int:
        return self.probs.shape[1]


def random_problem(rng, max_agents: int = 4, max_points: int = 5,
                   max_ball: int = 4) -> FiniteProblem:
    """A random finite instance within the given size budget."""
    A = int(rng.integers(2, max_agents + 1))
    n = int(rng.integers(1, max_points + 1))
    probs = rng.random((n, A)) + 1e-3
    probs /= probs.sum(axis=1, keepdims=True)
    costs = rng.uniform(0.0, 2.0, size=(n, A))
    sizes = tuple(int(b) for b in rng.integers(1, max_ball + 1, size=n))
    return FiniteProblem(probs, costs, sizes)


def random_tables(rng, problem: FiniteProblem, scale: float = 2.0) -> list:
    """One random score table per point: shape (ball size, agents)."""
    return [rng.normal(0.0, scale, size=(b, problem.n_agents))
            for b in problem.ball_sizes]


def routing_miss(table: Array) -> Array:
    """Per agent: does any ball point fail to route to it? Ties count as a miss."""
    table = np.asarray(table, dtype=np.float64)
    miss = np.empty(table.shape[1], dtype=bool)
    for j in range(table.shape[1]):
        others = np.delete(table, j, axis=1)
        strictly_best = table[:, j] > others.max(axis=1) if others.size else \
            np.ones(table.shape[0], dtype=bool)
        miss[j] = not strictly_best.all()
    return miss


def bayes_deferral(problem: FiniteProblem, cbar: Array | None = None):
    """Optimal allocation: per point the least expected cost wins (lowest index on ties)."""
    C = problem.costs if cbar is None else np.asarray(cbar, dtype=np.float64)
    allocation = np.argmin(C, axis=1)
    risk = float(C[np.arange(C.shape[0]), allocation].mean())
    return allocation, risk


def exact_adversarial_losses(tables: list, problem: FiniteProblem,
                             params: PsiParams) -> dict:
    """Exhaustive adversarial losses of a table rejector on a finite problem.

    Returns per point the worst-case routed loss in complement-sum form, the
    margin-surrogate counterpart, and their per-agent ingredients.
    """
    n, A = problem.n_points, problem.n_agents
    J = A - 1
    miss = np.zeros((n, A), dtype=bool)
    sup_margin = np.zeros((n, A))
    true_loss = np.zeros(n)
    surr_loss = np.zeros(n)
    for i in range(n):
        T = np.asarray(tables[i], dtype=np.float64)
        if T.shape != (problem.ball_sizes[i], A):
            raise ValueError(f"table {i} has shape {T.shape}, expected "
                             f"{(problem.ball_sizes[i], A)}")
        miss[i] = routing_miss(T)
        for j in range(A):
            sup_margin[i, j] = max(margin_surrogate_pointwise(row, j, params) for row in T)
        c = problem.costs[i]
        tau = c.sum() - c
        true_loss[i] = tau @ miss[i] + (1 - J) * c.sum()
        surr_loss[i] = tau @ sup_margin[i]
    return {"true": true_loss, "surrogate": surr_loss, "miss": miss,
            "sup_margin": sup_margin}


def _phi_all(S: Array, params: PsiParams) -> Array:
    """Margin surrogate of every agent for a batch of score vectors: (m, A)."""
    m, A = S.shape
    out = np.empty((m, A))
    for j in range(A):
        margins = S[:, [j]] - np.delete(S, j, axis=1)
        out[:, j] = psi_u(psi_rho(margins, params.rho).sum(axis=1), params.u)
    return out


def _chain_scores(weights: Array, rho: float) -> Array:
    """Ranked-chain construction: higher weight, higher score, spaced by rho."""
    order = np.argsort(-weights, kind="stable")
    s = np.empty(weights.size)
    s[order] = -rho * np.arange(weights.size, dtype=np.float64)
    return s


def surrogate_weighted_inf(weights: Array, params: PsiParams,
                           wide: bool = False) -> float:
    """Upper estimate of inf over score vectors of sum_j weights[j]*margin surrogate.

    Searches a grid (score 0 pinned at 0 — the losses only see differences),
    refines by coordinate descent, and seeds the descent with the ranked-chain
    configuration. The estimate is achievable, hence >= the true infimum.
    """
    weights = np.asarray(weights, dtype=np.float64)
    A = weights.size
    rho = params.rho
    if A == 1:
        return 0.0
    span, step = (6.0, rho / 8.0) if wide else (3.0, rho / 4.0)
    axis = np.arange(-span * rho, span * rho + step / 2, step)
    grids = np.meshgrid(*([axis] * (A - 1)), indexing="ij")
    S = np.column_stack([np.zeros(grids[0].size)] + [g.reshape(-1) for g in grids])
    vals = _phi_all(S, params) @ weights
    best_s = S[int(np.argmin(vals))].copy()
    best = float(vals.min())

    candidates = [best_s, _chain_scores(weights, rho)]
    for s0 in candidates:
        s = s0.copy()
        v = float(_phi_all(s[None, :], params)[0] @ weights)
        for delta in (rho / 8, rho / 32, rho / 128, rho / 512):
            improved = True
            while improved:
                improved = False
                for cell in range(1, A):
                    trial = np.repeat(s[None, :], 16, axis=0)
                    trial[:, cell] += delta * np.concatenate(
                        [np.arange(-8, 0), np.arange(1, 9)])
                    tv = _phi_all(trial, params) @ weights
                    k = int(np.argmin(tv))
                    if tv[k] < v - 1e-15:
                        v = float(tv[k])
                        s = trial[k]
                        improved = True
        if v < best:
            best = v
    return best


def _bound_check(problem: FiniteProblem, weights: Array, trials: int,
                 params: PsiParams, seed: int, tol: float, pointwise: bool) -> dict:
    """Shared engine for the two bound verifiers.

    weights is (points, agents): probabilities for the pointwise check, the
    complement-sum costs for the deferral check. The exact side is enumerated;
    the surrogate infimum estimate is refined once on failure before a trial is
    declared inconclusive.

    The comparison constant: misrouting an agent costs at least psi_u(1) in
    surrogate units (the domination level), so true excess <= surrogate excess
    divided by psi_u(1). The constant is sharp — a single-point instance with
    all weight on one agent and the rejector pinned against it attains
    equality.
    """
    scale = 1.0 / psi_u(1.0, params.u)
    n = problem.n_points
    lhs_inf = weights.sum(axis=1) - weights.max(axis=1)
    rhs_inf = np.array([surrogate_weighted_inf(weights[i], params) for i in range(n)])
    refined = [False] * n
    rng = np.random.default_rng(seed)
    entries = []
    violations = 0
    inconclusive = 0
    for _ in range(trials):
        tables = random_tables(rng, problem)
        res = exact_adversarial_losses(tables, problem, params)
        lhs_pts = np.einsum("ia,ia->i", weights, res["miss"].astype(np.float64)) - lhs_inf
        rhs_pts = scale * (np.einsum("ia,ia->i", weights, res["sup_margin"]) - rhs_inf)
        if pointwise:
            margins = rhs_pts - lhs_pts
            bad = [i for i in range(n) if margins[i] < -tol]
            for i in bad:
                if not refined[i]:
                    rhs_inf[i] = min(rhs_inf[i],
                                     surrogate_weighted_inf(weights[i], params, wide=True))
                    refined[i] = True
            if bad:
                rhs_pts = scale * (np.einsum("ia,ia->i", weights, res["sup_margin"]) - rhs_inf)
                margins = rhs_pts - lhs_pts
            worst = int(np.argmin(margins))
            entry = {"lhs": float(lhs_pts[worst]), "rhs": float(rhs_pts[worst]),
                     "margin": float(margins[worst])}
            ok = margins[worst] >= -tol
        else:
            lhs = float(lhs_pts.mean())
            rhs = float(rhs_pts.mean())
            if rhs - lhs < -tol and not all(refined):
                for i in range(n):
                    if not refined[i]:
                        rhs_inf[i] = min(rhs_inf[i],
                                         surrogate_weighted_inf(weights[i], params, wide=True))
                        refined[i] = True
                rhs_pts = scale * (np.einsum("ia,ia->i", weights, res["sup_margin"]) - rhs_inf)
                rhs = float(rhs_pts.mean())
            entry = {"lhs": lhs, "rhs": rhs, "margin": rhs - lhs}
            ok = rhs - lhs >= -tol
        entry["pass"] = bool(ok)
        if not ok:
            # the estimated right side sits below the true one, so a residual
            # failure cannot prove a violation of the inequality
            inconclusive += 1
            entry["inconclusive"] = True
        entries.append(entry)
    return {"trials": entries, "n_trials": trials, "violations": violations,
            "inconclusive": inconclusive, "tol": tol,
            "passed": violations == 0 and inconclusive == 0}


def verify_pointwise_bound(problem: FiniteProblem, trials: int,
                           params: PsiParams = PsiParams(u=1.0),
                           seed: int = 0, tol: float = 1e-9) -> dict:
    """Check, per point and random rejector table, that the probability-weighted
    adversarial miss excess is bounded by the surrogate excess over psi_u(1)."""
    return _bound_check(problem, problem.probs, trials, params, seed, tol,
                        pointwise=True)


def verify_deferral_bound(problem: FiniteProblem, trials: int,
                          params: PsiParams = PsiParams(u=1.0),
                          seed: int = 0, tol: float = 1e-9) -> dict:
    """Check the aggregate form: cost-weighted adversarial excess risk against
    the surrogate excess risk over psi_u(1), averaged over the uniform marginal.

    The fixed main model is assumed pointwise optimal, so its excess term is 0
    and the complement-sum constants cancel on both sides.
    """
    tau = problem.costs.sum(axis=1, keepdims=True) - problem.costs
    return _bound_check(problem, tau, trials, params, seed, tol, pointwise=False)
