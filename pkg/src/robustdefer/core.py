"""Domain types for samples, agents, and the cost algebra of two-stage deferral.

An instance routes each query to one agent out of {0..J}: agent 0 is the fixed
main model, agents 1..J are fixed experts with consultation costs beta[j].
Everything downstream (losses, training, attacks) consumes the per-agent cost
vector c and its complement-sum aggregate tau computed here.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass(frozen=True)
class Sample:
    """One data point: features plus a class label, a regression target, or both."""

    x: Array
    y: int | None = None
    t: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        if self.y is None and self.t is None:
            raise ValueError("sample carries neither a class label nor a regression target")


@dataclass(frozen=True)
class AgentPrediction:
    """What a single agent answers for a single input."""

    class_pred: int | None = None
    reg_pred: float | None = None


class AgentPool:
    """The frozen main model (agent 0) plus J frozen experts (agents 1..J).

    predictors[j] maps an (n, d) feature matrix to n predictions: integer labels
    for a classification task, reals for regression. Predictions must be
    deterministic in the input; agents are never updated after construction.
    beta lists the consultation cost per agent and must start with beta[0] = 0.
    """

    def __init__(self, predictors: Sequence[Callable[[Array], Array]],
                 beta: Sequence[float], task: str):
        if task not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown task kind: {task!r}")
        beta = np.asarray(beta, dtype=np.float64)
        if len(beta) != len(predictors):
            raise ValueError("beta must have one entry per agent (model included)")
        if beta[0] != 0.0:
            raise ValueError("the main model has no consultation cost; beta[0] must be 0")
        if (beta < 0).any():
            raise ValueError("consultation costs must be non-negative")
        self._predictors = list(predictors)
        self.beta = beta
        self.task = task

    @property
    def J(self) -> int:
        return len(self._predictors) - 1

    @property
    def n_agents(self) -> int:
        return len(self._predictors)

    def predict_batch(self, j: int, X: Array) -> Array:
        """Predictions of agent j on a feature matrix, as a flat array."""
        if not 0 <= j <= self.J:
            raise IndexError(f"agent index {j} outside 0..{self.J}")
        out = np.asarray(self._predictors[j](np.asarray(X, dtype=np.float64)))
        return out.reshape(-1)

    def predict(self, j: int, x: Array) -> AgentPrediction:
        val = self.predict_batch(j, np.asarray(x, dtype=np.float64)[None, :])[0]
        if self.task == CLASSIFICATION:
            return AgentPrediction(class_pred=int(val))
        return AgentPrediction(reg_pred=float(val))


@dataclass(frozen=True)
class CostVector:
    """Per-agent cost of assigning one query: c[j] = task loss of agent j (+ beta)."""

    c: Array

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        if c.ndim != 1 or c.size < 1:
            raise ValueError("cost vector must be a non-empty 1-d array")
        if not np.all(np.isfinite(c)) or (c < 0).any():
            raise ValueError("costs must be finite and non-negative")
        object.__setattr__(self, "c", c)

    @property
    def n_agents(self) -> int:
        return self.c.size


@dataclass(frozen=True)
class AggregatedCosts:
    """Complement sums tau[j] = sum_{i != j} c[i]; the weights of the surrogate."""

    tau: Array

    def __post_init__(self):
        object.__setattr__(self, "tau", np.asarray(self.tau, dtype=np.float64))


# A task cost maps (prediction, sample) -> non-negative real.
TaskCost = Callable[[AgentPrediction, Sample], float]


def zero_one_cost(pred: AgentPrediction, z: Sample) -> float:
    """0-1 loss on the class prediction."""
    if pred.class_pred is None or z.y is None:
        raise ValueError("classification cost requires class predictions and labels")
    return 0.0 if pred.class_pred == z.y else 1.0


def absolute_error_cost(pred: AgentPrediction, z: Sample) -> float:
    """Absolute error |f(x) - t|: the per-sample root of a single squared residual."""
    if pred.reg_pred is None or z.t is None:
        raise ValueError("regression cost requires real predictions and targets")
    return abs(pred.reg_pred - z.t)


def cost_vector(pool: AgentPool, model_pred: AgentPrediction | None, z: Sample,
                psi: TaskCost) -> CostVector:
    """Costs of assigning sample z to each agent: psi of the prediction, plus beta.

    model_pred overrides agent 0's pooled prediction when given (the main model's
    answer is often computed upfront); pass None to query the pool.
    """
    if model_pred is None:
        model_pred = pool.predict(0, z.x)
    c = np.empty(pool.n_agents, dtype=np.float64)
    c[0] = psi(model_pred, z)
    for j in range(1, pool.n_agents):
        c[j] = psi(pool.predict(j, z.x), z) + pool.beta[j]
    return CostVector(c)


def cost_matrix(pool: AgentPool, X: Array, y: Array | None = None,
                t: Array | None = None) -> Array:
    """(n, J+1) cost matrix over a batch, using the standard task cost.

    Classification uses the 0-1 loss against y; regression the absolute error
    against t. Costs are always computed on the inputs given here — callers
    cache this matrix once on clean data and never recompute it under attack.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    C = np.empty((n, pool.n_agents), dtype=np.float64)
    for j in range(pool.n_agents):
        preds = pool.predict_batch(j, X)
        if pool.task == CLASSIFICATION:
            if y is None:
                raise ValueError("classification costs need labels")
            C[:, j] = (preds.astype(np.int64) != np.asarray(y, dtype=np.int64)) * 1.0
        else:
            if t is None:
                raise ValueError("regression costs need targets")
            C[:, j] = np.abs(preds - np.asarray(t, dtype=np.float64))
        C[:, j] += pool.beta[j]
    return C


def aggregate_costs(c: CostVector | Array) -> AggregatedCosts:
    """tau[j] = sum of every other agent's cost; linear in c."""
    arr = c.c if isinstance(c, CostVector) else np.asarray(c, dtype=np.float64)
    return AggregatedCosts(arr.sum() - arr)


def aggregate_matrix(C: Array) -> Array:
    """Row-wise complement sums for a batch cost matrix."""
    C = np.asarray(C, dtype=np.float64)
    return C.sum(axis=1, keepdims=True) - C


def true_deferral_loss(c: CostVector | Array, chosen: int) -> float:
    """Cost actually incurred when the rejector routes to `chosen`."""
    arr = c.c if isinstance(c, CostVector) else np.asarray(c, dtype=np.float64)
    if not 0 <= chosen < arr.size:
        raise IndexError(f"agent index {chosen} outside 0..{arr.size - 1}")
    return float(arr[chosen])


def argmax_agent(values: Array) -> int:
    """Routing rule: highest value wins, ties broken toward the lowest index."""
    return int(np.argmax(values))


def argmin_agent(values: Array) -> int:
    """Lowest value wins, ties broken toward the lowest index."""
    return int(np.argmin(values))
