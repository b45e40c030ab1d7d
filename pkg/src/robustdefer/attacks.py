"""Inner maximizations over perturbation balls.

Generic projected gradient ascent/descent on p-norm balls, the untargeted and
targeted routing attacks built on the comp-sum surrogate, and the per-agent
supremum of the pairwise-difference displacement used by the smooth surrogate.
Returned iterates are always the best seen, start included; PGD values are
lower bounds of the true suprema and no optimality is claimed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import comp_sum_grads, comp_sum_values, pairwise_diff_matrix
from .scorer import Scorer, backward_batch, forward_batch_cached

Array = np.ndarray

L_INF = "infinity"
L_TWO = "two"
AT_CENTER = "at_center"
RANDOM_IN_BALL = "random_in_ball"


@dataclass(frozen=True)
class AttackSpec:
    """Ball geometry and iteration budget for one inner maximization.

    gamma = 0 degenerates to the singleton ball (the clean point); step_size 0
    is tolerated for that case only.
    """

    gamma: float
    steps: int
    step_size: float
    p: str = L_INF
    init: str = AT_CENTER

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("ball radius must be non-negative")
        if self.steps < 1:
            raise ValueError("need at least one step")
        if self.step_size < 0:
            raise ValueError("step size must be non-negative")
        if self.p not in (L_INF, L_TWO):
            raise ValueError(f"unknown norm selector: {self.p!r}")
        if self.init not in (AT_CENTER, RANDOM_IN_BALL):
            raise ValueError(f"unknown init mode: {self.init!r}")


def project(x0: Array, x: Array, spec: AttackSpec) -> Array:
    """Nearest point of the ball around x0: coordinate clamp for l-inf, radial rescale for l2.

    Works on single vectors and on row-aligned matrices alike.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x0.shape != x.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x.shape}")
    if spec.p == L_INF:
        return np.clip(x, x0 - spec.gamma, x0 + spec.gamma)
    d = x - x0
    if d.ndim == 1:
        n = float(np.linalg.norm(d))
        if n > spec.gamma:
            return x0 + d * (spec.gamma / n)
        return x.copy()
    n = np.linalg.norm(d, axis=1, keepdims=True)
    scale = np.where(n > spec.gamma, spec.gamma / np.where(n > 0, n, 1.0), 1.0)
    return x0 + d * scale


def step_direction(g: Array, p: str) -> Array:
    """Signed step for l-inf, unit-normalized step for l2 (zero gradient moves nowhere)."""
    if p == L_INF:
        return np.sign(g)
    if g.ndim == 1:
        n = float(np.linalg.norm(g))
        return g / n if n > 0 else np.zeros_like(g)
    n = np.linalg.norm(g, axis=1, keepdims=True)
    return np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)


def _start(x0: Array, spec: AttackSpec, rng) -> Array:
    if spec.init == AT_CENTER:
        return np.array(x0, dtype=np.float64, copy=True)
    if rng is None:
        raise ValueError("random_in_ball init needs an rng")
    if spec.p == L_INF:
        return x0 + rng.uniform(-spec.gamma, spec.gamma, size=np.shape(x0))
    d = rng.normal(size=np.shape(x0))
    flat = d.reshape(-1)
    n = np.linalg.norm(flat)
    if n == 0:
        return np.array(x0, dtype=np.float64, copy=True)
    radius = spec.gamma * rng.uniform() ** (1.0 / flat.size)
    return x0 + d * (radius / n)


def pgd(objective, x0: Array, spec: AttackSpec, sense: str = "maximize",
        rng=None) -> Array:
    """Iterated signed/normalized gradient steps with projection; best-seen iterate wins.

    objective(x) must return (value, gradient w.r.t. x). Ties keep the earlier
    iterate, so runs are deterministic for a fixed start.
    """
    if sense not in ("maximize", "minimize"):
        raise ValueError(f"unknown sense: {sense!r}")
    sgn = 1.0 if sense == "maximize" else -1.0
    x0 = np.asarray(x0, dtype=np.float64)
    x = _start(x0, spec, rng)
    v, g = objective(x)
    _check_finite(v, g, 0)
    best_v, best_x = v, x.copy()
    for t in range(1, spec.steps + 1):
        x = project(x0, x + sgn * spec.step_size * step_direction(g, spec.p), spec)
        v, g = objective(x)
        _check_finite(v, g, t)
        if sgn * v > sgn * best_v:
            best_v, best_x = v, x.copy()
    return best_x


def _check_finite(v, g, t):
    if not np.all(np.isfinite(g)) or not np.all(np.isfinite(v)):
        raise RuntimeError(f"non-finite objective at iterate {t}: value {v!r}")


def _weighted_scores_objective(r: Scorer, weights: Array, u: float):
    """(value, input-grad) of sum_j weights[j] * comp_sum_surrogate(scores, j, u)."""
    weights = np.asarray(weights, dtype=np.float64)

    def obj(x):
        S, acts = forward_batch_cached(r.spec, r.theta, x[None, :])
        value = float(weights @ comp_sum_values(S, u)[0])
        upstream = weights @ comp_sum_grads(S, u)[0]
        _, gx = backward_batch(r.spec, r.theta, acts, upstream[None, :], want_theta=False)
        return value, gx[0]

    return obj


def untargeted_attack(r: Scorer, tau, x: Array, spec: AttackSpec, u: float,
                      rng=None) -> Array:
    """Perturbation maximizing the aggregate-cost-weighted surrogate: push routing anywhere bad."""
    tau_arr = getattr(tau, "tau", tau)
    return pgd(_weighted_scores_objective(r, tau_arr, u), x, spec, "maximize", rng=rng)


def targeted_attack(r: Scorer, tau, x: Array, j_t: int, spec: AttackSpec, u: float,
                    rng=None) -> Array:
    """Perturbation minimizing agent j_t's weighted surrogate: drag routing toward j_t."""
    tau_arr = np.asarray(getattr(tau, "tau", tau), dtype=np.float64)
    if not 0 <= j_t < tau_arr.size:
        raise IndexError(f"target agent {j_t} outside 0..{tau_arr.size - 1}")
    weights = np.zeros_like(tau_arr)
    weights[j_t] = tau_arr[j_t]
    return pgd(_weighted_scores_objective(r, weights, u), x, spec, "minimize", rng=rng)


def displacement_objective(r: Scorer, x_clean: Array, j: int):
    """(value, input-grad) of the pairwise-diff displacement norm for agent j.

    value(x') = || M_j s(x') - M_j s(x_clean) ||_2. At zero displacement the
    norm has no gradient; the subgradient choice is the uniform unit direction,
    which lets ascent leave the center deterministically.
    """
    A = r.spec.output_dim
    M = pairwise_diff_matrix(j, A)
    s_clean = r.scores(x_clean)
    d_clean = M @ s_clean

    def obj(x):
        S, acts = forward_batch_cached(r.spec, r.theta, x[None, :])
        disp = M @ S[0] - d_clean
        value = float(np.linalg.norm(disp))
        if value > 0:
            w = disp / value
        else:
            w = np.full(A - 1, 1.0 / np.sqrt(A - 1)) if A > 1 else np.zeros(0)
        upstream = M.T @ w
        _, gx = backward_batch(r.spec, r.theta, acts, upstream[None, :], want_theta=False)
        return value, gx[0]

    return obj


def smooth_sup(r: Scorer, x: Array, j: int, spec: AttackSpec, rng=None) -> float:
    """Best-found displacement of agent j's pairwise diffs over the ball (0 at gamma=0)."""
    if not 0 <= j < r.spec.output_dim:
        raise IndexError(f"agent index {j} outside 0..{r.spec.output_dim - 1}")
    obj = displacement_objective(r, x, j)
    x_best = pgd(obj, x, spec, "maximize", rng=rng)
    return obj(x_best)[0]


# Batched attack loops for evaluation: same stepping rule, per-row best tracking.

def _batch_pgd(obj, X: Array, spec: AttackSpec, sense: str) -> Array:
    sgn = 1.0 if sense == "maximize" else -1.0
    X = np.asarray(X, dtype=np.float64)
    X_cur = X.copy()
    v, G = obj(X_cur)
    _check_finite(v, G, 0)
    best_v = v.copy()
    best_X = X_cur.copy()
    for t in range(1, spec.steps + 1):
        X_cur = project(X, X_cur + sgn * spec.step_size * step_direction(G, spec.p), spec)
        v, G = obj(X_cur)
        _check_finite(v, G, t)
        better = sgn * v > sgn * best_v
        best_v[better] = v[better]
        best_X[better] = X_cur[better]
    return best_X


def _weighted_scores_batch_objective(r: Scorer, W: Array, u: float):
    def obj(X):
        S, acts = forward_batch_cached(r.spec, r.theta, X)
        values = np.einsum("na,na->n", W, comp_sum_values(S, u))
        upstream = np.einsum("na,nak->nk", W, comp_sum_grads(S, u))
        _, gX = backward_batch(r.spec, r.theta, acts, upstream, want_theta=False)
        return values, gX

    return obj


def untargeted_attack_batch(r: Scorer, Tau: Array, X: Array, spec: AttackSpec,
                            u: float) -> Array:
    """Row-wise untargeted attacks; Tau holds one aggregate-cost row per sample."""
    return _batch_pgd(_weighted_scores_batch_objective(r, np.asarray(Tau, float), u),
                      X, spec, "maximize")


def targeted_attack_batch(r: Scorer, Tau: Array, X: Array, j_t: int, spec: AttackSpec,
                          u: float) -> Array:
    """Row-wise targeted attacks toward agent j_t."""
    Tau = np.asarray(Tau, dtype=np.float64)
    W = np.zeros_like(Tau)
    W[:, j_t] = Tau[:, j_t]
    return _batch_pgd(_weighted_scores_batch_objective(r, W, u), X, spec, "minimize")
