"""Data ingestion, agent construction, and experiment orchestration.

Two reproducible testbeds: the California Housing regression task with
region-specialized expert regressors, and a synthetic Gaussian-cluster
classification task with category-specialized simulated experts. Everything
downstream of the raw data — standardization, agent training, rejector
training, attacks, metrics — is driven by explicit seeds so that a config maps
to one report, byte for byte (the timestamp field aside).

The housing CSV is not bundled; see the README for the one-off fetch step.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, L_INF
from .core import AgentPool, CLASSIFICATION, REGRESSION, cost_matrix
from .losses import PsiParams
from .scorer import Scorer, ScorerSpec, backward_batch, forward_batch_cached, init_params
from .trainer import (CLEAN, TARGETED, UNTARGETED, TrainConfig, TrainingDiverged,
                      _lr_at, _OPTIMIZERS, evaluate, train_baseline, train_sard)

Array = np.ndarray

HOUSING_FEATURES = ("MedInc", "HouseAge", "AveRooms", "AveBedrms",
                    "Population", "AveOccup", "Latitude", "Longitude")
HOUSING_TARGET = "MedHouseVal"
HOUSING_ROWS = 20640
HOUSING_ENV_VAR = "ROBUSTDEFER_HOUSING_CSV"
HOUSING_DEFAULT_PATH = "data/california_housing.csv"

# Attack radius per standardized feature: a quarter of each feature's
# (unit) variance after standardization.
DEFAULT_ATTACK_RADIUS = 0.25


@dataclass(frozen=True)
class DatasetSchema:
    """Column contract for a delimited dataset: feature order plus the label."""

    feature_names: tuple
    target_name: str

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValueError("duplicate feature names")


HOUSING_SCHEMA = DatasetSchema(HOUSING_FEATURES, HOUSING_TARGET)


@dataclass
class Dataset:
    """A loaded, split, standardized table.

    X_* and y_* are standardized with the train split's statistics; raw_* keep
    the pre-standardization feature rows (region assignment reads raw
    latitude). feature_std is guaranteed positive — constant columns are
    rejected at load time.
    """

    schema: DatasetSchema
    X_train: Array
    y_train: Array
    X_test: Array
    y_test: Array
    raw_train: Array
    raw_test: Array
    feature_mean: Array
    feature_std: Array
    target_mean: float
    target_std: float

    def standardize_features(self, raw: Array) -> Array:
        return (np.asarray(raw, dtype=np.float64) - self.feature_mean) / self.feature_std

    def destandardize_features(self, X: Array) -> Array:
        return np.asarray(X, dtype=np.float64) * self.feature_std + self.feature_mean

    def destandardize_target(self, y: Array) -> Array:
        return np.asarray(y, dtype=np.float64) * self.target_std + self.target_mean


def _parse_csv(path, schema: DatasetSchema):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        cols = {}
        for name in (*schema.feature_names, schema.target_name):
            if name not in header:
                raise ValueError(f"{path}: missing column {name!r}")
            cols[name] = header.index(name)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for name in (*schema.feature_names, schema.target_name):
                cell = row[cols[name]].strip()
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: non-numeric cell {cell!r} in column {name!r} "
                        f"at line {lineno}") from None
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    return data[:, :-1], data[:, -1]


def load_csv(path, schema: DatasetSchema, *, seed: int = 0,
             test_fraction: float = 0.2, standardize_target: bool = True) -> Dataset:
    """Parse, split and standardize a delimited dataset.

    The seed fixes the train/test permutation; statistics come from the train
    split only and are stored on the returned Dataset (the attack radius is
    defined in the standardized units they induce).
    """
    raw, target = _parse_csv(path, schema)
    n = raw.shape[0]
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(n * test_fraction)
    test_idx, train_idx = perm[:n_test], perm[n_test:]

    raw_train, raw_test = raw[train_idx], raw[test_idx]
    mean = raw_train.mean(axis=0)
    std = raw_train.std(axis=0)
    for k, s in enumerate(std):
        if s == 0.0:
            raise ValueError(f"constant feature column {schema.feature_names[k]!r}")
    t_train, t_test = target[train_idx], target[test_idx]
    if standardize_target:
        t_mean, t_std = float(t_train.mean()), float(t_train.std())
        if t_std == 0.0:
            raise ValueError(f"constant target column {schema.target_name!r}")
    else:
        t_mean, t_std = 0.0, 1.0
    return Dataset(
        schema=schema,
        X_train=(raw_train - mean) / std,
        y_train=(t_train - t_mean) / t_std,
        X_test=(raw_test - mean) / std,
        y_test=(t_test - t_mean) / t_std,
        raw_train=raw_train,
        raw_test=raw_test,
        feature_mean=mean,
        feature_std=std,
        target_mean=t_mean,
        target_std=t_std,
    )


def default_housing_path() -> str:
    return os.environ.get(HOUSING_ENV_VAR, HOUSING_DEFAULT_PATH)


def load_housing(path=None, *, seed: int = 0,
                 expect_rows: int | None = HOUSING_ROWS) -> Dataset:
    """Load the California Housing CSV (see README for the fetch step).

    The row count of the public dataset is verified at ingestion; pass
    expect_rows=None to load a subset (e.g. for smoke tests).
    """
    path = Path(path if path is not None else default_housing_path())
    if not path.exists():
        raise FileNotFoundError(
            f"housing CSV not found at {path}; fetch it first (see README) or "
            f"point {HOUSING_ENV_VAR} at it")
    ds = load_csv(path, HOUSING_SCHEMA, seed=seed)
    n = ds.X_train.shape[0] + ds.X_test.shape[0]
    if expect_rows is not None and n != expect_rows:
        raise ValueError(f"{path}: expected {expect_rows} rows, found {n}")
    return ds


# ---------------------------------------------------------------------------
# supervised fitting of frozen agents (and of the main model)

def _fit_scorer(X: Array, spec: ScorerSpec, batch_grad, cfg: TrainConfig) -> Array:
    """Generic mini-batch fit of a scorer network; returns the final parameters.

    batch_grad(S, rows) -> (mean loss, upstream d loss / d S). Uses the same
    seed-derivation and schedule conventions as the rejector trainers but no
    validation split and no traversal ledger — agent fitting is setup work, not
    part of the accounted training run.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    ss = np.random.SeedSequence(cfg.seed)
    theta = init_params(spec, ss.spawn(2)[1])
    shuffle_rng = np.random.default_rng(ss.spawn(3)[2])
    opt = _OPTIMIZERS[cfg.optimizer](theta.size, cfg)
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            B = order[start:start + cfg.batch_size]
            S, acts = forward_batch_cached(spec, theta, X[B])
            loss, upstream = batch_grad(S, B)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite fit loss at epoch {epoch}")
            gtheta, _ = backward_batch(spec, theta, acts, upstream, want_input=False)
            if cfg.weight_decay:
                gtheta += 2.0 * cfg.weight_decay * theta
            opt.step(theta, gtheta, lr)
    return theta


def fit_supervised(X: Array, y: Array, hidden: tuple, cfg: TrainConfig) -> Scorer:
    """Least-squares fit of a single-output network; returns the frozen scorer."""
    y = np.asarray(y, dtype=np.float64)
    spec = ScorerSpec(input_dim=np.asarray(X).shape[1], output_dim=1, hidden=tuple(hidden))

    def batch_grad(S, B):
        err = S[:, 0] - y[B]
        return float(np.mean(err * err)), (2.0 * err / len(B))[:, None]

    return Scorer(spec, _fit_scorer(X, spec, batch_grad, cfg))


def fit_classifier(X: Array, y: Array, n_classes: int, hidden: tuple,
                   cfg: TrainConfig) -> Scorer:
    """Softmax cross-entropy fit of an n_classes-output network."""
    y = np.asarray(y, dtype=np.int64)
    spec = ScorerSpec(input_dim=np.asarray(X).shape[1], output_dim=n_classes,
                      hidden=tuple(hidden))

    def batch_grad(S, B):
        Z = np.exp(S - S.max(axis=1, keepdims=True))
        P = Z / Z.sum(axis=1, keepdims=True)
        picked = P[np.arange(len(B)), y[B]]
        loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
        upstream = P.copy()
        upstream[np.arange(len(B)), y[B]] -= 1.0
        return loss, upstream / len(B)

    return Scorer(spec, _fit_scorer(X, spec, batch_grad, cfg))


def regression_predictor(scorer: Scorer):
    return lambda X: scorer.scores_batch(X)[:, 0]


def classification_predictor(scorer: Scorer):
    return lambda X: np.argmax(scorer.scores_batch(X), axis=1)


# ---------------------------------------------------------------------------
# synthetic experts (classification)

@dataclass(frozen=True)
class SyntheticExpertSpec:
    """A simulated expert: near-oracle on its assigned categories, noise elsewhere.

    On an assigned category the expert answers the true label with probability
    p, otherwise (and on every unassigned category) a uniformly random label.
    An empty assignment is allowed and models a weak expert. All randomness is
    a pure function of (seed, agent index, input row), so predictions are
    frozen: the same input always gets the same answer.
    """

    assigned: tuple
    p: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "assigned", tuple(sorted(int(a) for a in self.assigned)))
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")


def _expert_draws(seed: int, j: int, X: Array, n_classes: int):
    """Per row: a uniform variate and a uniform label, content-addressed."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    u = np.empty(X.shape[0])
    lab = np.empty(X.shape[0], dtype=np.int64)
    prefix = seed.to_bytes(8, "little", signed=True) + j.to_bytes(4, "little")
    for i, row in enumerate(X):
        d = hashlib.blake2b(prefix + row.tobytes(), digest_size=16).digest()
        u[i] = int.from_bytes(d[:8], "little") / 2.0 ** 64
        lab[i] = int.from_bytes(d[8:], "little") % n_classes
    return u, lab


def make_synthetic_experts(specs, n_classes: int, truth):
    """Build one deterministic predictor per expert spec.

    truth(X) must return the true label of each row; the experts consult it on
    assigned categories and answer correctly with their probability p.
    """
    predictors = []
    for j, spec in enumerate(specs, start=1):
        assigned = np.zeros(n_classes, dtype=bool)
        for a in spec.assigned:
            if not 0 <= a < n_classes:
                raise ValueError(f"assigned category {a} outside 0..{n_classes - 1}")
            assigned[a] = True

        def predict(X, spec=spec, assigned=assigned, j=j):
            X = np.asarray(X, dtype=np.float64)
            y_true = np.asarray(truth(X), dtype=np.int64)
            u, lab = _expert_draws(spec.seed, j, X, n_classes)
            knows = assigned[y_true] & (u < spec.p)
            return np.where(knows, y_true, lab)

        predictors.append(predict)
    return predictors


@dataclass
class SyntheticTask:
    """Gaussian class clusters with an exact ground-truth lookup.

    X_* are standardized with train statistics. true_labels answers with the
    generated label on any row of the train or test matrices (content-keyed
    lookup) and falls back to the nearest center for other points, so the
    simulated experts stay well-defined off-distribution. Cluster overlap
    therefore caps what any trained model can reach while leaving the experts'
    correctness probability untouched — which is what gives routing its value.
    """

    centers: Array
    X_train: Array
    y_train: Array
    X_test: Array
    y_test: Array
    feature_mean: Array
    feature_std: Array

    def __post_init__(self):
        self._labels = {}
        for X, y in ((self.X_train, self.y_train), (self.X_test, self.y_test)):
            for row, label in zip(np.ascontiguousarray(X), y):
                self._labels[row.tobytes()] = int(label)

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]

    def true_labels(self, X: Array) -> Array:
        X = np.ascontiguousarray(X, dtype=np.float64)
        raw = X * self.feature_std + self.feature_mean
        out = np.empty(X.shape[0], dtype=np.int64)
        for i, row in enumerate(X):
            hit = self._labels.get(row.tobytes())
            if hit is None:
                hit = int(np.argmin(((raw[i] - self.centers) ** 2).sum(axis=1)))
            out[i] = hit
        return out


def make_gaussian_task(n_classes: int = 20, dim: int = 32, n_train: int = 3000,
                       n_test: int = 1000, radius: float = 5.0, noise: float = 1.0,
                       contested_pairs: int = 0, contested_distance: float = 2.0,
                       weak_block: int = 2, weak_isolation: float = 1.0,
                       seed: int = 0) -> SyntheticTask:
    """Sample class centers on a sphere and unit-noise clusters around them.

    With contested_pairs = k > 0, k classes from just below the final
    weak_block classes are re-centered a fixed small distance away from the
    last k classes, so each pair's clusters overlap: mass near those routing
    boundaries is what a targeted attack can flip, and a robust router must
    commit it to one side. Keeping k < weak_block leaves at least one
    uncontested class at the end; weak_isolation > 1 pushes those uncontested
    final classes radially outward so their routing has slack no attack
    reaches.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, dim))
    centers *= radius / np.linalg.norm(centers, axis=1, keepdims=True)
    for k in range(contested_pairs, weak_block):
        centers[n_classes - 1 - k] *= weak_isolation
    for k in range(contested_pairs):
        anchor = n_classes - 1 - k
        mover = n_classes - 1 - weak_block - k
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        centers[mover] = centers[anchor] + contested_distance * direction
    n = n_train + n_test
    y = rng.integers(0, n_classes, size=n)
    X = centers[y] + noise * rng.normal(size=(n, dim))
    mean = X[:n_train].mean(axis=0)
    std = X[:n_train].std(axis=0)
    return SyntheticTask(
        centers=centers,
        X_train=(X[:n_train] - mean) / std,
        y_train=y[:n_train],
        X_test=(X[n_train:] - mean) / std,
        y_test=y[n_train:],
        feature_mean=mean,
        feature_std=std,
    )


# ---------------------------------------------------------------------------
# regional experts (housing)

def make_regional_experts(dataset: Dataset, thresholds=(36.0, 38.5), *,
                          hidden=(128, 64, 32), epochs: int = 500,
                          learning_rate: float = 1e-3, batch_size: int = 8096,
                          seed: int = 0):
    """Train one frozen regressor per latitude band; returns (predictors, masks).

    Bands are [min, t0), [t0, t1), [t1, max] on the raw latitude of the train
    split; each expert sees only its band's rows (standardized with the global
    statistics). An empty band is an error.
    """
    if "Latitude" not in dataset.schema.feature_names:
        raise ValueError("dataset has no Latitude feature")
    lat = dataset.raw_train[:, dataset.schema.feature_names.index("Latitude")]
    edges = (-np.inf, *sorted(thresholds), np.inf)
    predictors = []
    masks = []
    for r in range(len(edges) - 1):
        mask = (lat >= edges[r]) & (lat < edges[r + 1])
        if not mask.any():
            raise ValueError(
                f"no training rows with latitude in [{edges[r]}, {edges[r + 1]})")
        cfg = TrainConfig(epochs=epochs, batch_size=batch_size,
                          learning_rate=learning_rate, schedule="cosine",
                          seed=seed + r, val_fraction=0.0)
        scorer = fit_supervised(dataset.X_train[mask], dataset.y_train[mask],
                                hidden, cfg)
        predictors.append(regression_predictor(scorer))
        masks.append(mask)
    return predictors, masks


# ---------------------------------------------------------------------------
# experiment orchestration

@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment run, in plain serializable fields."""

    task: str                              # "housing" or "synthetic"
    methods: tuple = ("baseline", "sard")
    trials: int = 4
    seed: int = 0
    data_path: str | None = None           # housing CSV location override
    # rejector architecture and optimization
    rejector_hidden: tuple = (8, 16)
    baseline_epochs: int = 100
    sard_epochs: int = 400
    learning_rate: float = 0.01
    schedule: str = "cosine"
    optimizer: str = "adaptive_moment"
    batch_size: int = 8096
    weight_decay: float = 1e-4
    val_fraction: float = 0.2
    u: float = 1.0
    rho: float = 1.0
    nu: float = 0.05
    # perturbation ball (shared by robust training and evaluation attacks);
    # training can use a slightly larger ball than evaluation so robustness at
    # the evaluation radius has margin
    gamma: float = DEFAULT_ATTACK_RADIUS
    attack_steps: int = 10
    train_gamma_scale: float = 1.0
    # main-model fit; model_train_count limits the model to a prefix of the
    # training rows (None = all), which caps its accuracy below the experts'
    model_hidden: tuple = (64, 32)
    model_epochs: int = 300
    model_lr: float = 1e-3
    model_train_count: int | None = None
    # housing regional experts
    expert_hidden: tuple = (128, 64, 32)
    expert_epochs: int = 500
    expert_lr: float = 1e-3
    # synthetic task shape
    n_classes: int = 20
    dim: int = 32
    n_train: int = 3000
    n_test: int = 1000
    radius: float = 5.0
    cluster_noise: float = 1.0
    # contested pairs overlap a strong expert's class with a weak expert's
    # class, putting real probability mass near that routing boundary; the
    # uncontested weak classes sit weak_isolation x farther out
    contested_pairs: int = 0
    contested_distance: float = 2.0
    weak_isolation: float = 1.0
    # the two broad-coverage experts answer with probability expert_p; the
    # narrow-coverage one (the targeted-attack victim) with weak_expert_p
    expert_p: float = 0.94
    weak_expert_p: float = 0.94

    def __post_init__(self):
        if self.task not in ("housing", "synthetic"):
            raise ValueError(f"unknown task: {self.task!r}")
        unknown = set(self.methods) - {"baseline", "sard"}
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "rejector_hidden", tuple(self.rejector_hidden))
        object.__setattr__(self, "model_hidden", tuple(self.model_hidden))
        object.__setattr__(self, "expert_hidden", tuple(self.expert_hidden))


def housing_config(**overrides) -> ExperimentConfig:
    return ExperimentConfig(task="housing", **overrides)


def synthetic_config(**overrides) -> ExperimentConfig:
    defaults = dict(
        rejector_hidden=(32, 16),
        baseline_epochs=300,
        sard_epochs=300,
        learning_rate=0.005,
        batch_size=256,
        model_hidden=(32,),
        model_epochs=80,
        # a data-starved model sits well below the experts' hit rate, so the
        # router has something real to learn, while the clusters stay separable
        # enough for routing itself to be easy
        model_train_count=200,
        nu=0.05,
        expert_p=0.98,
        weak_expert_p=0.94,
        attack_steps=40,
        train_gamma_scale=1.3,
        # one contested class pair straddling the weak expert's boundary plus
        # an isolated safe weak class: the targeted attack can flood a brittle
        # router with the contested mass while a robust router's weak share
        # stays pinned to the isolated class
        contested_pairs=1,
        contested_distance=1.7,
        weak_isolation=1.8,
    )
    defaults.update(overrides)
    return ExperimentConfig(task="synthetic", **defaults)


def config_digest(config: ExperimentConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _trial_seeds(config: ExperimentConfig, trial: int, count: int):
    return [int(s) for s in
            np.random.SeedSequence([config.seed, trial]).generate_state(count)]


def _attack_spec(config: ExperimentConfig, scale: float = 1.0) -> AttackSpec:
    # the 2.5x overshoot is the usual PGD step choice; projection keeps every
    # iterate inside the ball
    gamma = scale * config.gamma
    return AttackSpec(gamma=gamma, steps=config.attack_steps,
                      step_size=2.5 * gamma / config.attack_steps, p=L_INF)


def _rejector_config(config: ExperimentConfig, method: str, seed: int) -> TrainConfig:
    sard = method == "sard"
    return TrainConfig(
        epochs=config.sard_epochs if sard else config.baseline_epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        schedule=config.schedule,
        optimizer=config.optimizer,
        weight_decay=config.weight_decay,
        psi_params=PsiParams(u=config.u, rho=config.rho if sard else 1.0,
                             nu=config.nu if sard else 0.0),
        attack=_attack_spec(config, config.train_gamma_scale) if sard else None,
        seed=seed,
        val_fraction=config.val_fraction,
    )


def _housing_trial_setup(config: ExperimentConfig, trial: int):
    data_seed, expert_seed, model_seed, _ = _trial_seeds(config, trial, 4)
    ds = load_housing(config.data_path, seed=data_seed)
    model_cfg = TrainConfig(epochs=config.model_epochs, batch_size=config.batch_size,
                            learning_rate=config.model_lr, schedule="cosine",
                            seed=model_seed, val_fraction=0.0)
    model = fit_supervised(ds.X_train, ds.y_train, config.model_hidden, model_cfg)
    experts, _ = make_regional_experts(
        ds, hidden=config.expert_hidden, epochs=config.expert_epochs,
        learning_rate=config.expert_lr, batch_size=config.batch_size,
        seed=expert_seed)
    predictors = [regression_predictor(model), *experts]
    pool = AgentPool(predictors, beta=[0.0] * len(predictors), task=REGRESSION)
    return pool, ds.X_train, {"t": ds.y_train}, ds.X_test, {"t": ds.y_test}


def _synthetic_trial_setup(config: ExperimentConfig, trial: int):
    # the task and its agents are the benchmark and stay fixed across trials;
    # only the rejector's training randomness varies (housing works the same
    # way: the CSV is fixed, the split seed is what moves)
    data_seed, expert_seed, model_seed = (
        int(s) for s in np.random.SeedSequence([config.seed]).generate_state(3))
    K = config.n_classes
    strong = (K - 2) // 2
    task = make_gaussian_task(K, config.dim, config.n_train,
                              config.n_test, config.radius, config.cluster_noise,
                              contested_pairs=config.contested_pairs,
                              contested_distance=config.contested_distance,
                              weak_block=K - 2 * strong,
                              weak_isolation=config.weak_isolation,
                              seed=data_seed)
    model_cfg = TrainConfig(epochs=config.model_epochs, batch_size=config.batch_size,
                            learning_rate=config.model_lr, schedule="cosine",
                            seed=model_seed, val_fraction=0.0)
    n_fit = config.model_train_count or task.X_train.shape[0]
    model = fit_classifier(task.X_train[:n_fit], task.y_train[:n_fit],
                           config.n_classes, config.model_hidden, model_cfg)
    specs = [
        SyntheticExpertSpec(assigned=tuple(range(0, strong)), p=config.expert_p,
                            seed=expert_seed),
        SyntheticExpertSpec(assigned=tuple(range(strong, 2 * strong)),
                            p=config.expert_p, seed=expert_seed),
        # the weak expert: only the leftover categories, and less reliable
        SyntheticExpertSpec(assigned=tuple(range(2 * strong, K)),
                            p=config.weak_expert_p, seed=expert_seed),
    ]
    experts = make_synthetic_experts(specs, K, task.true_labels)
    predictors = [classification_predictor(model), *experts]
    pool = AgentPool(predictors, beta=[0.0] * len(predictors), task=CLASSIFICATION)
    return pool, task.X_train, {"y": task.y_train}, task.X_test, {"y": task.y_test}


def _mode_list(n_agents: int):
    modes = [(CLEAN, None), (UNTARGETED, None)]
    modes.extend((TARGETED, j) for j in range(1, n_agents))
    return modes


def _mode_key(mode: str, target) -> str:
    return mode if target is None else f"{mode}:{target}"


def run_experiment(config: ExperimentConfig, out_dir=None) -> dict:
    """Train, attack and evaluate every configured method over the trial seeds.

    Returns the report dict; when out_dir is given, also writes report.json and
    report.csv there. All attacks are evaluation-time attacks on the rejector —
    agents answer on clean inputs throughout.
    """
    setup = _housing_trial_setup if config.task == "housing" else _synthetic_trial_setup
    per_mode = {m: {} for m in config.methods}
    shares = {m: {} for m in config.methods}
    ledgers = {m: [0, 0] for m in config.methods}
    n_agents = None
    for trial in range(config.trials):
        pool, X_train, y_train_kw, X_test, y_test_kw = setup(config, trial)
        n_agents = pool.n_agents
        C_train = cost_matrix(pool, X_train, **y_train_kw)
        C_test = cost_matrix(pool, X_test, **y_test_kw)
        spec = ScorerSpec(input_dim=X_train.shape[1], output_dim=pool.n_agents,
                          hidden=config.rejector_hidden)
        rejector_seed = _trial_seeds(config, trial, 4)[3]
        eval_attack = _attack_spec(config)
        for method in config.methods:
            cfg = _rejector_config(config, method, rejector_seed)
            if method == "sard":
                rejector, history, ledger = train_sard(X_train, pool, C_train, spec, cfg)
            else:
                rejector, history = train_baseline(X_train, pool, C_train, spec, cfg)
                ledger = history.ledger
            ledgers[method][0] += ledger.forward_count
            ledgers[method][1] += ledger.backward_count
            for mode, target in _mode_list(pool.n_agents):
                m = evaluate(rejector, X_test, pool, C_test, **y_test_kw,
                             attack_mode=mode, attack=eval_attack, u=config.u,
                             target=target)
                key = _mode_key(mode, target)
                per_mode[method].setdefault(key, []).append(m.metric)
                shares[method].setdefault(key, []).append(m.deferral_shares.tolist())
    metric_name = "rmse" if config.task == "housing" else "accuracy"
    results = {}
    for method in config.methods:
        results[method] = {}
        for key, vals in per_mode[method].items():
            arr = np.asarray(vals)
            share_arr = np.asarray(shares[method][key])
            results[method][key] = {
                "mean": float(arr.mean()),
                "std": float(arr.std()),
                "per_trial": [float(v) for v in vals],
                "deferral_shares": {
                    "mean": [float(s) for s in share_arr.mean(axis=0)],
                    "per_trial": shares[method][key],
                },
            }
    report = {
        "task": config.task,
        "metric": metric_name,
        "config": asdict(config),
        "config_digest": config_digest(config),
        "trials": config.trials,
        "n_agents": n_agents,
        "modes": [_mode_key(m, t) for m, t in _mode_list(n_agents)],
        "results": results,
        "ledger_totals": {m: {"forward": ledgers[m][0], "backward": ledgers[m][1]}
                          for m in config.methods},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report_json(out_dir / "report.json", report)
        write_report_csv(out_dir / "report.csv", report)
    return report


def write_report_json(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(path, report: dict) -> None:
    """Flat methods-by-modes table: one row per method, mean±std cells."""
    modes = report["modes"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *modes])
        for method in sorted(report["results"]):
            row = [method]
            for key in modes:
                cell = report["results"][method][key]
                row.append(f"{cell['mean']:.4f}±{cell['std']:.4f}")
            w.writerow(row)
