"""Training loops for the rejector, with exact traversal accounting.

train_baseline minimizes the aggregate-cost-weighted comp-sum surrogate;
train_sard additionally maximizes, per sample and agent, the displacement of
the pairwise score differences inside the perturbation ball and penalizes it
(weight nu), scaling the clean scores by 1/rho. Both share one loop skeleton so
that with radius 0, nu 0 and rho 1 the SARD trajectory is bit-identical to the
baseline's.

Traversal budget per SARD epoch over n samples and A agents with T attack
steps: exactly n clean forwards, n*A*T inner forwards and backwards, and n
update backwards — i.e. n(1+A*T) of each. The inner maximization therefore
performs T-1 position updates and spends its last forward/backward revisiting
the best-seen iterate to rebuild its activations and capture the parameter
gradient there (the Danskin direction of the sampled objective). With T = 1
there is no budget to probe beyond the center and the smooth term stays 0.
Validation-risk evaluation for checkpoint selection is not tallied. Baseline
selection uses the clean validation surrogate; SARD selection attacks the
validation inputs first (with radius 0 the attack returns the inputs
unchanged, so the degenerate-SARD bit-identity with the baseline is kept).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, project, step_direction, targeted_attack_batch, untargeted_attack_batch
from .core import aggregate_matrix
from .losses import PsiParams, comp_sum_grads, comp_sum_values, pairwise_diff_matrix
from .scorer import (Scorer, ScorerSpec, backward_batch, forward_batch,
                     forward_batch_cached, init_params)

Array = np.ndarray

CLEAN = "clean"
UNTARGETED = "untargeted"
TARGETED = "targeted"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class CostLedger:
    """Exact tallies of scorer traversals, incremented inside the scorer calls.

    phases maps a phase name ("clean", "pgd:<agent>", "update") to its
    [forward, backward] counts; the totals are the sums over phases.
    """

    forward_count: int = 0
    backward_count: int = 0
    phase: str = "clean"
    phases: dict = field(default_factory=dict)

    def _bucket(self):
        return self.phases.setdefault(self.phase, [0, 0])

    def add_forward(self, n: int):
        self.forward_count += n
        self._bucket()[0] += n

    def add_backward(self, n: int):
        self.backward_count += n
        self._bucket()[1] += n


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by both trainers."""

    epochs: int
    batch_size: int
    learning_rate: float
    schedule: str = "constant"            # or "cosine"
    optimizer: str = "adaptive_moment"    # or "sgd", "sgd_momentum"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    psi_params: PsiParams = PsiParams(u=1.0)
    attack: AttackSpec | None = None
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule: {self.schedule!r}")
        if self.optimizer not in ("sgd", "sgd_momentum", "adaptive_moment"):
            raise ValueError(f"unknown optimizer: {self.optimizer!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_risk: float
    lr: float


@dataclass
class History:
    """Per-epoch log plus the checkpointing outcome and the traversal ledger."""

    rows: list
    best_epoch: int
    ledger: CostLedger

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_risk", "lr"])
            for r in self.rows:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_risk), repr(r.lr)])


@dataclass
class Metrics:
    """Evaluation outcome for one attack mode."""

    task: str
    metric: float          # accuracy for classification, rmse for regression
    mean_cost: float
    deferral_shares: Array
    n: int
    attack_mode: str
    target: int | None = None


class _Sgd:
    def __init__(self, n_params: int, cfg: TrainConfig):
        pass

    def step(self, theta: Array, grad: Array, lr: float):
        theta -= lr * grad


class _SgdMomentum:
    def __init__(self, n_params: int, cfg: TrainConfig):
        self.mu = cfg.momentum
        self.v = np.zeros(n_params)

    def step(self, theta: Array, grad: Array, lr: float):
        self.v = self.mu * self.v + grad
        theta -= lr * self.v


class _AdaptiveMoment:
    def __init__(self, n_params: int, cfg: TrainConfig):
        self.b1, self.b2, self.eps = cfg.beta1, cfg.beta2, cfg.eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta: Array, grad: Array, lr: float):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        theta -= lr * mhat / (np.sqrt(vhat) + self.eps)


_OPTIMIZERS = {"sgd": _Sgd, "sgd_momentum": _SgdMomentum, "adaptive_moment": _AdaptiveMoment}


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))


def _split_indices(n: int, cfg: TrainConfig):
    ss = np.random.SeedSequence(cfg.seed)
    split_rng = np.random.default_rng(ss.spawn(1)[0])
    perm = split_rng.permutation(n)
    n_val = int(n * cfg.val_fraction)
    return perm[n_val:], perm[:n_val]


def _check_setup(X: Array, costs: Array, rejector_spec: ScorerSpec):
    X = np.asarray(X, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if X.ndim != 2 or costs.ndim != 2 or X.shape[0] != costs.shape[0]:
        raise ValueError("features and costs must be row-aligned 2-d arrays")
    if costs.shape[1] != rejector_spec.output_dim:
        raise ValueError(
            f"rejector has {rejector_spec.output_dim} outputs but costs cover "
            f"{costs.shape[1]} agents")
    if (costs < 0).any() or not np.all(np.isfinite(costs)):
        raise ValueError("costs must be finite and non-negative")
    return X, costs


def _train_loop(X: Array, costs: Array, rejector_spec: ScorerSpec, cfg: TrainConfig,
                batch_step, val_risk_fn, ledger: CostLedger):
    """Shared skeleton: split, init, shuffle, schedule, checkpoint selection.

    batch_step(theta, opt_step, X_B, tau_B, lr) runs one update and returns the
    batch objective; val_risk_fn(theta, X_val, tau_val) scores the validation
    split (untallied). Without a validation split the final parameters win.
    """
    X, costs = _check_setup(X, costs, rejector_spec)
    n = X.shape[0]
    tau = aggregate_matrix(costs)
    train_idx, val_idx = _split_indices(n, cfg)
    if train_idx.size == 0:
        raise ValueError("empty training split")

    ss = np.random.SeedSequence(cfg.seed)
    theta = init_params(rejector_spec, ss.spawn(2)[1])
    shuffle_rng = np.random.default_rng(ss.spawn(3)[2])
    opt = _OPTIMIZERS[cfg.optimizer](theta.size, cfg)

    rows = []
    best_epoch = -1
    best_val = np.inf
    best_theta = theta.copy()
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        order = shuffle_rng.permutation(train_idx.size)
        loss_sum = 0.0
        for start in range(0, train_idx.size, cfg.batch_size):
            B = train_idx[order[start:start + cfg.batch_size]]
            obj = batch_step(theta, opt, X[B], tau[B], lr)
            if not np.isfinite(obj):
                raise TrainingDiverged(
                    f"non-finite loss {obj!r} at epoch {epoch}, batch offset {start}, "
                    f"lr {lr:.6g}, |theta| {np.linalg.norm(theta):.6g}")
            loss_sum += obj * len(B)
        train_loss = loss_sum / train_idx.size
        if val_idx.size:
            val_risk = val_risk_fn(theta, X[val_idx], tau[val_idx])
            if val_risk < best_val:
                best_val, best_epoch = val_risk, epoch
                best_theta = theta.copy()
        else:
            val_risk = train_loss
        rows.append(EpochRow(epoch, float(train_loss), float(val_risk), float(lr)))
    if val_idx.size == 0:
        best_epoch = cfg.epochs - 1
        best_theta = theta.copy()
    history = History(rows=rows, best_epoch=best_epoch, ledger=ledger)
    return Scorer(rejector_spec, best_theta), history


def _routed_cost(rejector_spec: ScorerSpec, theta, X_val, tau_val):
    # recover per-agent costs from the aggregates: c_j = sum(tau)/(A-1) - tau_j
    S = forward_batch(rejector_spec, theta, X_val)
    A = tau_val.shape[1]
    if A < 2:
        return 0.0
    costs = tau_val.sum(axis=1, keepdims=True) / (A - 1) - tau_val
    routed = np.argmax(S, axis=1)
    return float(costs[np.arange(len(routed)), routed].mean())


def _clean_val_risk(rejector_spec: ScorerSpec):
    """Checkpoint selection on the realized deferral cost of the routed agent."""
    def val_risk_fn(theta, X_val, tau_val):
        return _routed_cost(rejector_spec, theta, X_val, tau_val)
    return val_risk_fn


def _attacked_val_risk(rejector_spec: ScorerSpec, u: float, attack: AttackSpec):
    """Routed-cost validation risk at untargeted-attacked inputs, so checkpoint
    selection favors the epochs that are actually robust rather than merely
    clean."""
    def val_risk_fn(theta, X_val, tau_val):
        scorer = Scorer(rejector_spec, theta)
        X_adv = untargeted_attack_batch(scorer, tau_val, X_val, attack, u)
        return _routed_cost(rejector_spec, theta, X_adv, tau_val)
    return val_risk_fn


def train_baseline(X, pool, costs, rejector_spec: ScorerSpec, cfg: TrainConfig):
    """Clean two-stage training of the rejector; returns (scorer, history).

    Minimizes the mean aggregate-cost-weighted comp-sum surrogate plus
    weight_decay * ||theta||^2. pool is accepted for symmetry with train_sard
    and may be None; costs must already contain the consultation surcharges.
    """
    u = cfg.psi_params.u
    eta = cfg.weight_decay
    ledger = CostLedger()

    def batch_step(theta, opt, X_B, tau_B, lr):
        K = X_B.shape[0]
        ledger.phase = "clean"
        S, acts = forward_batch_cached(rejector_spec, theta, X_B, ledger=ledger)
        L = comp_sum_values(S, u)
        obj = float(np.einsum("na,na->n", tau_B, L).mean()) + eta * float(theta @ theta)
        G = comp_sum_grads(S, u)
        upstream = np.einsum("na,nak->nk", tau_B, G) / K
        ledger.phase = "update"
        gtheta, _ = backward_batch(rejector_spec, theta, acts, upstream,
                                   ledger=ledger, want_input=False)
        gtheta += 2.0 * eta * theta
        opt.step(theta, gtheta, lr)
        return obj

    return _train_loop(X, costs, rejector_spec, cfg, batch_step,
                       _clean_val_risk(rejector_spec), ledger)


def train_sard(X, pool, costs, rejector_spec: ScorerSpec, cfg: TrainConfig):
    """Smooth adversarially robust deferral training; returns (scorer, history, ledger).

    Per batch and agent, projected ascent maximizes the pairwise-diff
    displacement norm within the ball (T-1 position updates, then one revisit
    of the best-seen iterate whose backward captures the parameter gradient
    there); the update step descends the full objective
    mean_i sum_j tau_ij (Phi(s_i/rho, j) + nu * sup_ij) + weight_decay*||theta||^2.
    """
    if cfg.attack is None:
        raise ValueError("train_sard needs cfg.attack")
    atk = cfg.attack
    u, rho, nu = cfg.psi_params.u, cfg.psi_params.rho, cfg.psi_params.nu
    eta = cfg.weight_decay
    A = rejector_spec.output_dim
    J = A - 1
    fallback = 1.0 / np.sqrt(J) if J > 0 else 0.0
    ledger = CostLedger()

    def batch_step(theta, opt, X_B, tau_B, lr):
        K = X_B.shape[0]
        ledger.phase = "clean"
        S0, acts0 = forward_batch_cached(rejector_spec, theta, X_B, ledger=ledger)
        sup_vals = np.zeros((K, A))
        g_sup = np.zeros_like(theta)
        U_clean_sup = np.zeros((K, A))
        for j in range(A):
            ledger.phase = f"pgd:{j}"
            M = pairwise_diff_matrix(j, A)
            D0 = S0 @ M.T
            X_cur, S_cur, acts_cur = X_B, S0, acts0
            val = np.zeros(K)
            disp = np.zeros((K, J))
            best_val = np.zeros(K)
            best_X = X_B.copy()
            for _ in range(atk.steps - 1):
                # subgradient of the norm; uniform direction where it is kinked
                W = np.where(val[:, None] > 0, disp / np.where(val[:, None] > 0, val[:, None], 1.0),
                             fallback)
                _, gX = backward_batch(rejector_spec, theta, acts_cur, W @ M,
                                       ledger=ledger, want_theta=False)
                X_cur = project(X_B, X_cur + atk.step_size * step_direction(gX, atk.p), atk)
                S_cur, acts_cur = forward_batch_cached(rejector_spec, theta, X_cur,
                                                       ledger=ledger)
                disp = S_cur @ M.T - D0
                val = np.linalg.norm(disp, axis=1)
                better = val > best_val
                best_val[better] = val[better]
                best_X[better] = X_cur[better]
            # last visit: rebuild the best iterate's activations, capture the
            # parameter gradient of the sup term there
            S_hat, acts_hat = forward_batch_cached(rejector_spec, theta, best_X,
                                                   ledger=ledger)
            disp_hat = S_hat @ M.T - D0
            val_hat = np.linalg.norm(disp_hat, axis=1)
            W_hat = np.where(val_hat[:, None] > 0,
                             disp_hat / np.where(val_hat[:, None] > 0, val_hat[:, None], 1.0),
                             0.0)
            alpha = (nu / K) * tau_B[:, j]
            cap_upstream = (alpha[:, None] * W_hat) @ M
            gtheta_j, _ = backward_batch(rejector_spec, theta, acts_hat, cap_upstream,
                                         ledger=ledger, want_input=False)
            g_sup += gtheta_j
            U_clean_sup -= cap_upstream
            sup_vals[:, j] = val_hat
        Ssc = S0 / rho
        L = comp_sum_values(Ssc, u)
        per_sample = np.einsum("na,na->n", tau_B, L + nu * sup_vals)
        obj = float(per_sample.mean()) + eta * float(theta @ theta)
        G = comp_sum_grads(Ssc, u)
        upstream = np.einsum("na,nak->nk", tau_B, G) / (rho * K) + U_clean_sup
        ledger.phase = "update"
        gtheta, _ = backward_batch(rejector_spec, theta, acts0, upstream,
                                   ledger=ledger, want_input=False)
        gtheta += g_sup + 2.0 * eta * theta
        opt.step(theta, gtheta, lr)
        return obj

    scorer, history = _train_loop(X, costs, rejector_spec, cfg, batch_step,
                                  _attacked_val_risk(rejector_spec, u, atk),
                                  ledger)
    return scorer, history, ledger


def evaluate(rejector: Scorer, X, pool, costs, *, y=None, t=None,
             attack_mode: str = CLEAN, attack: AttackSpec | None = None,
             u: float = 1.0, target: int | None = None) -> Metrics:
    """Route each (optionally perturbed) sample, score the routed agent's clean answer.

    Costs and agent predictions always come from the clean inputs — attacks
    reach the rejector only. Returns the task metric (accuracy or RMSE), the
    mean realized cost, and the per-agent deferral shares.
    """
    X = np.asarray(X, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    n, A = costs.shape
    preds = np.stack([pool.predict_batch(j, X) for j in range(A)], axis=1)
    if attack_mode == CLEAN:
        X_eval = X
    elif attack_mode == UNTARGETED:
        if attack is None:
            raise ValueError("untargeted mode needs an attack spec")
        X_eval = untargeted_attack_batch(rejector, aggregate_matrix(costs), X, attack, u)
    elif attack_mode == TARGETED:
        if attack is None or target is None:
            raise ValueError("targeted mode needs an attack spec and a target agent")
        X_eval = targeted_attack_batch(rejector, aggregate_matrix(costs), X, target, attack, u)
    else:
        raise ValueError(f"unknown attack mode: {attack_mode!r}")
    routed = np.argmax(rejector.scores_batch(X_eval), axis=1)
    rows = np.arange(n)
    if pool.task == "classification":
        if y is None:
            raise ValueError("classification evaluation needs labels")
        metric = float(np.mean(preds[rows, routed].astype(np.int64) == np.asarray(y)))
    else:
        if t is None:
            raise ValueError("regression evaluation needs targets")
        err = preds[rows, routed] - np.asarray(t, dtype=np.float64)
        metric = float(np.sqrt(np.mean(err * err)))
    return Metrics(
        task=pool.task,
        metric=metric,
        mean_cost=float(costs[rows, routed].mean()),
        deferral_shares=np.bincount(routed, minlength=A) / n,
        n=n,
        attack_mode=attack_mode,
        target=target,
    )


def write_history_csv(history: History, path) -> None:
    history.write_csv(Path(path))
