"""Differentiable scoring models: linear maps and small rectifier MLPs.

Reverse-mode gradients are hand-rolled for the two fixed architectures; one
backward sweep emits the gradient w.r.t. the parameters and the inputs
together, so a traversal tally can count it as a single backward pass. All
arithmetic is float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

Array = np.ndarray

RECTIFIER = "rectifier"
IDENTITY = "identity"

CHECKPOINT_FORMAT = "robustdefer-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ScorerSpec:
    """Shape of a scoring model: input width, output width, hidden widths, activation."""

    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = ()
    activation: str = RECTIFIER

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.activation not in (RECTIFIER, IDENTITY):
            raise ValueError(f"unknown activation: {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, first to last."""
        widths = [self.input_dim, *self.hidden, self.output_dim]
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims)


@dataclass(frozen=True)
class ParamVector:
    """All weights and biases of one scorer, flattened in layer order.

    Layout per layer: the (fan_out, fan_in) weight matrix row-major, then the
    bias. The spec fixes the layout, so a flat array plus its spec round-trips
    exactly.
    """

    spec: ScorerSpec
    theta: Array

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (self.spec.n_params,):
            raise ValueError(
                f"parameter vector has {theta.size} entries, spec wants {self.spec.n_params}")
        object.__setattr__(self, "theta", theta)


def _unpack(spec: ScorerSpec, theta: Array) -> list[tuple[Array, Array]]:
    """Views (no copies) of the per-layer (W, b) pairs inside the flat array."""
    out = []
    off = 0
    for fi, fo in spec.layer_dims:
        W = theta[off:off + fi * fo].reshape(fo, fi)
        off += fi * fo
        b = theta[off:off + fo]
        off += fo
        out.append((W, b))
    return out


def init_params(spec: ScorerSpec, seed) -> Array:
    """Seeded symmetric-uniform weights (half-width sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.n_params, dtype=np.float64)
    off = 0
    for fi, fo in spec.layer_dims:
        a = np.sqrt(6.0 / (fi + fo))
        theta[off:off + fi * fo] = rng.uniform(-a, a, size=fi * fo)
        off += fi * fo + fo  # biases stay zero
    return theta


def forward_batch(spec: ScorerSpec, theta: Array, X: Array, ledger=None) -> Array:
    """Scores for a feature matrix: (n, d) -> (n, output_dim)."""
    S, _ = forward_batch_cached(spec, theta, X, ledger=ledger)
    return S


def forward_batch_cached(spec: ScorerSpec, theta: Array, X: Array, ledger=None):
    """Forward pass that also returns the layer activations needed by backward_batch."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"expected (n, {spec.input_dim}) inputs, got {X.shape}")
    layers = _unpack(spec, np.asarray(theta, dtype=np.float64))
    acts = [X]
    a = X
    for li, (W, b) in enumerate(layers):
        z = a @ W.T + b
        if li < len(layers) - 1 and spec.activation == RECTIFIER:
            z = np.maximum(z, 0.0)  # subgradient at 0 is 0: the mask below uses > 0
        acts.append(z)
        a = z
    if ledger is not None:
        ledger.add_forward(X.shape[0])
    return a, acts


def backward_batch(spec: ScorerSpec, theta: Array, acts: list[Array], upstream: Array,
                   ledger=None, want_theta: bool = True, want_input: bool = True):
    """One reverse sweep: (sum-over-rows parameter gradient, per-row input gradient).

    upstream holds d(scalar)/d(scores) per row; rescale rows beforehand to
    weight samples. Either output can be switched off, but the sweep (and the
    tally) happens once regardless.
    """
    layers = _unpack(spec, np.asarray(theta, dtype=np.float64))
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != acts[-1].shape:
        raise ValueError(f"upstream shape {upstream.shape} != scores shape {acts[-1].shape}")
    gtheta = np.zeros(spec.n_params, dtype=np.float64) if want_theta else None
    gviews = _unpack(spec, gtheta) if want_theta else None
    delta = upstream
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a_prev = acts[li]
        if want_theta:
            gW, gb = gviews[li]
            gW += delta.T @ a_prev
            gb += delta.sum(axis=0)
        if li > 0:
            delta = delta @ W
            if spec.activation == RECTIFIER:
                delta = delta * (acts[li] > 0.0)
        else:
            delta = delta @ W
    if ledger is not None:
        ledger.add_backward(upstream.shape[0])
    gx = delta if want_input else None
    return gtheta, gx


def forward(spec: ScorerSpec, theta: Array, x: Array, ledger=None) -> Array:
    """Scores for a single feature vector."""
    return forward_batch(spec, theta, np.asarray(x, dtype=np.float64)[None, :], ledger=ledger)[0]


def grad_params(spec: ScorerSpec, theta: Array, x: Array, upstream: Array,
                ledger=None) -> Array:
    """Gradient of upstream @ scores w.r.t. the flat parameters, single sample."""
    _, acts = forward_batch_cached(spec, theta, np.asarray(x, dtype=np.float64)[None, :])
    gtheta, _ = backward_batch(spec, theta, acts, np.asarray(upstream, dtype=np.float64)[None, :],
                               ledger=ledger, want_input=False)
    return gtheta


def grad_input(spec: ScorerSpec, theta: Array, x: Array, upstream: Array,
               ledger=None) -> Array:
    """Gradient of upstream @ scores w.r.t. the input features, single sample."""
    _, acts = forward_batch_cached(spec, theta, np.asarray(x, dtype=np.float64)[None, :])
    _, gx = backward_batch(spec, theta, acts, np.asarray(upstream, dtype=np.float64)[None, :],
                           ledger=ledger, want_theta=False)
    return gx[0]


@dataclass
class Scorer:
    """A spec bundled with its (mutable during training) flat parameters."""

    spec: ScorerSpec
    theta: Array

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)

    def scores(self, x: Array, ledger=None) -> Array:
        return forward(self.spec, self.theta, x, ledger=ledger)

    def scores_batch(self, X: Array, ledger=None) -> Array:
        return forward_batch(self.spec, self.theta, X, ledger=ledger)

    def route(self, x: Array) -> int:
        s = self.scores(x)
        return int(np.argmax(s))

    def route_batch(self, X: Array) -> Array:
        return np.argmax(self.scores_batch(X), axis=1)


def save_checkpoint(path, scorer: Scorer, extra: dict | None = None) -> None:
    """Versioned JSON checkpoint; float64 parameters survive the round trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": {
            "input_dim": scorer.spec.input_dim,
            "output_dim": scorer.spec.output_dim,
            "hidden": list(scorer.spec.hidden),
            "activation": scorer.spec.activation,
        },
        "params": [float(v) for v in scorer.theta],
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[Scorer, dict]:
    text = Path(path).read_text()
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a scorer checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    spec = ScorerSpec(
        input_dim=int(doc["spec"]["input_dim"]),
        output_dim=int(doc["spec"]["output_dim"]),
        hidden=tuple(doc["spec"]["hidden"]),
        activation=doc["spec"]["activation"],
    )
    theta = np.asarray(doc["params"], dtype=np.float64)
    ParamVector(spec, theta)  # validates the layout length
    return Scorer(spec, theta), doc.get("extra", {})
