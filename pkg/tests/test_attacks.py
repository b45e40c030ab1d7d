import numpy as np
import pytest

from robustdefer.attacks import (
    AT_CENTER,
    L_INF,
    L_TWO,
    RANDOM_IN_BALL,
    AttackSpec,
    pgd,
    project,
    smooth_sup,
    step_direction,
    targeted_attack,
    targeted_attack_batch,
    untargeted_attack,
    untargeted_attack_batch,
)
from robustdefer.losses import comp_sum_values
from robustdefer.scorer import Scorer, ScorerSpec, init_params


def _mlp_scorer(seed=0, d=4, A=3):
    spec = ScorerSpec(input_dim=d, output_dim=A, hidden=(6,))
    return Scorer(spec, init_params(spec, seed))


def _weighted_value(r, tau, x, u=1.0):
    S = r.scores_batch(np.asarray(x, dtype=np.float64)[None, :])
    return float(np.asarray(tau) @ comp_sum_values(S, u)[0])


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(gamma=-0.1, steps=1, step_size=0.1)
    with pytest.raises(ValueError):
        AttackSpec(gamma=0.1, steps=0, step_size=0.1)
    with pytest.raises(ValueError):
        AttackSpec(gamma=0.1, steps=1, step_size=-0.1)
    with pytest.raises(ValueError):
        AttackSpec(gamma=0.1, steps=1, step_size=0.1, p="inf")
    with pytest.raises(ValueError):
        AttackSpec(gamma=0.1, steps=1, step_size=0.1, init="warm")
    AttackSpec(gamma=0.0, steps=1, step_size=0.0)  # degenerate singleton ball


# ---------------------------------------------------------------------------
# projection and stepping

def test_project_linf_exact_clamp():
    rng = np.random.default_rng(0)
    spec = AttackSpec(gamma=0.3, steps=1, step_size=0.1, p=L_INF)
    x0 = rng.normal(size=6)
    x = x0 + rng.normal(size=6) * 2.0
    out = project(x0, x, spec)
    assert np.all(out >= x0 - 0.3)
    assert np.all(out <= x0 + 0.3)
    inside = np.abs(x - x0) <= 0.3
    np.testing.assert_array_equal(out[inside], x[inside])


def test_project_l2_rescales_to_boundary():
    spec = AttackSpec(gamma=1.0, steps=1, step_size=0.1, p=L_TWO)
    x0 = np.zeros(3)
    out = project(x0, np.array([3.0, 0.0, 4.0]), spec)
    assert abs(np.linalg.norm(out) - 1.0) <= 1e-12
    near = np.array([0.1, 0.2, -0.1])
    np.testing.assert_array_equal(project(x0, near, spec), near)


def test_project_batch_rows():
    spec = AttackSpec(gamma=0.5, steps=1, step_size=0.1, p=L_TWO)
    X0 = np.zeros((3, 2))
    X = np.array([[3.0, 4.0], [0.1, 0.1], [0.0, 0.0]])
    out = project(X0, X, spec)
    norms = np.linalg.norm(out, axis=1)
    assert np.all(norms <= 0.5 * (1 + 1e-12))
    np.testing.assert_array_equal(out[1], X[1])


def test_project_shape_mismatch():
    spec = AttackSpec(gamma=0.5, steps=1, step_size=0.1)
    with pytest.raises(ValueError):
        project(np.zeros(3), np.zeros(4), spec)


def test_step_direction():
    g = np.array([2.0, -0.5, 0.0])
    np.testing.assert_array_equal(step_direction(g, L_INF), [1.0, -1.0, 0.0])
    d2 = step_direction(g, L_TWO)
    assert abs(np.linalg.norm(d2) - 1.0) <= 1e-12
    np.testing.assert_array_equal(step_direction(np.zeros(3), L_TWO), np.zeros(3))


# ---------------------------------------------------------------------------
# pgd core

def test_one_step_linear_closed_form_bitwise():
    """On a linear objective, one l-inf step with overshoot lands exactly on
    x +/- gamma * sign(g), bit for bit."""
    rng = np.random.default_rng(1)
    for _ in range(200):
        d = int(rng.integers(1, 8))
        g = rng.normal(size=d)
        g[rng.random(size=d) < 0.2] = 0.0
        x0 = rng.normal(size=d)
        gamma = float(rng.uniform(0.01, 1.0))
        spec = AttackSpec(gamma=gamma, steps=1, step_size=2.5 * gamma, p=L_INF)

        def obj(x, g=g):
            return float(g @ x), g

        up = pgd(obj, x0, spec, "maximize")
        down = pgd(obj, x0, spec, "minimize")
        assert up.tobytes() == (x0 + gamma * np.sign(g)).tobytes()
        assert down.tobytes() == (x0 - gamma * np.sign(g)).tobytes()


def test_pgd_best_seen_achieves_logged_max():
    logged = []

    def obj(x):
        v = float(np.sin(3.0 * x[0]) + 0.3 * x[1])
        logged.append(v)
        return v, np.array([3.0 * np.cos(3.0 * x[0]), 0.3])

    spec = AttackSpec(gamma=1.0, steps=30, step_size=0.3, p=L_INF)
    out = pgd(obj, np.zeros(2), spec, "maximize")
    seen = list(logged)
    v_out, _ = obj(out)
    assert v_out == max(seen)


def test_pgd_rejects_bad_sense_and_nonfinite():
    spec = AttackSpec(gamma=0.5, steps=2, step_size=0.2)
    with pytest.raises(ValueError):
        pgd(lambda x: (0.0, np.zeros(2)), np.zeros(2), spec, "sideways")
    with pytest.raises(RuntimeError):
        pgd(lambda x: (np.nan, np.zeros(2)), np.zeros(2), spec, "maximize")


def test_pgd_random_start_needs_rng():
    spec = AttackSpec(gamma=0.5, steps=1, step_size=0.2, init=RANDOM_IN_BALL)
    with pytest.raises(ValueError):
        pgd(lambda x: (0.0, np.zeros(2)), np.zeros(2), spec)


def test_random_start_containment_and_reproducibility():
    x0 = np.array([1.0, -2.0, 0.5])
    for p in (L_INF, L_TWO):
        spec = AttackSpec(gamma=0.4, steps=1, step_size=0.0, p=p, init=RANDOM_IN_BALL)
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(7)
            out = pgd(lambda x: (0.0, np.zeros(3)), x0, spec, rng=rng)
            if p == L_INF:
                assert np.all(np.abs(out - x0) <= 0.4)
            else:
                assert np.linalg.norm(out - x0) <= 0.4 * (1 + 1e-12)
            outs.append(out.tobytes())
        assert outs[0] == outs[1]


# ---------------------------------------------------------------------------
# routing attacks

def test_untargeted_attack_containment_both_norms():
    rng = np.random.default_rng(2)
    r = _mlp_scorer(3)
    tau = np.array([1.0, 0.5, 1.5])
    for p in (L_INF, L_TWO):
        spec = AttackSpec(gamma=0.25, steps=8, step_size=0.08, p=p)
        for _ in range(20):
            x = rng.normal(size=4)
            adv = untargeted_attack(r, tau, x, spec, u=1.0)
            if p == L_INF:
                assert np.all(adv >= x - 0.25) and np.all(adv <= x + 0.25)
            else:
                assert np.linalg.norm(adv - x) <= 0.25 * (1 + 1e-12)


def test_untargeted_attack_never_below_clean_value():
    rng = np.random.default_rng(3)
    r = _mlp_scorer(4)
    tau = np.array([0.8, 1.2, 0.4])
    spec = AttackSpec(gamma=0.3, steps=10, step_size=0.075)
    for _ in range(10):
        x = rng.normal(size=4)
        adv = untargeted_attack(r, tau, x, spec, u=1.0)
        assert _weighted_value(r, tau, adv) >= _weighted_value(r, tau, x) - 1e-12


def test_targeted_attack_never_above_clean_value():
    rng = np.random.default_rng(4)
    r = _mlp_scorer(5)
    tau = np.array([0.8, 1.2, 0.4])
    spec = AttackSpec(gamma=0.3, steps=10, step_size=0.075)
    w = np.zeros(3)
    w[2] = tau[2]
    for _ in range(10):
        x = rng.normal(size=4)
        adv = targeted_attack(r, tau, x, 2, spec, u=1.0)
        assert _weighted_value(r, w, adv) <= _weighted_value(r, w, x) + 1e-12


def test_targeted_attack_index_error():
    r = _mlp_scorer(6)
    spec = AttackSpec(gamma=0.1, steps=1, step_size=0.1)
    with pytest.raises(IndexError):
        targeted_attack(r, np.ones(3), np.zeros(4), 3, spec, u=1.0)


def test_attack_determinism_at_center():
    r = _mlp_scorer(7)
    tau = np.ones(3)
    spec = AttackSpec(gamma=0.2, steps=6, step_size=0.1, init=AT_CENTER)
    x = np.array([0.3, -0.1, 0.7, 1.2])
    a = untargeted_attack(r, tau, x, spec, u=1.0)
    b = untargeted_attack(r, tau, x, spec, u=1.0)
    assert a.tobytes() == b.tobytes()


def test_gamma_monotone_attack_power():
    """Nested balls with proportional steps: a wider ball never attacks worse."""
    r = _mlp_scorer(8)
    tau = np.array([1.0, 0.7, 1.3])
    rng = np.random.default_rng(5)
    X = rng.normal(size=(10, 4))
    prev = np.full(10, -np.inf)
    for gamma in (0.0, 0.05, 0.1, 0.2, 0.4):
        spec = AttackSpec(gamma=gamma, steps=10,
                          step_size=2.5 * gamma / 10, p=L_INF)
        vals = np.array([
            _weighted_value(r, tau, untargeted_attack(r, tau, x, spec, u=1.0))
            for x in X])
        assert np.all(vals >= prev - 1e-9)
        prev = vals


def test_radius_zero_returns_input_bitwise():
    r = _mlp_scorer(9)
    rng = np.random.default_rng(6)
    X = rng.normal(size=(5, 4))
    tau = np.ones((5, 3))
    spec = AttackSpec(gamma=0.0, steps=4, step_size=0.0)
    out = untargeted_attack_batch(r, tau, X, spec, u=1.0)
    assert out.tobytes() == X.tobytes()
    out_t = targeted_attack_batch(r, tau, X, 1, spec, u=1.0)
    assert out_t.tobytes() == X.tobytes()
    assert smooth_sup(r, X[0], 0, spec) == 0.0


# ---------------------------------------------------------------------------
# batch loops

def test_batch_matches_single_row_attacks():
    r = _mlp_scorer(10)
    rng = np.random.default_rng(7)
    X = rng.normal(size=(6, 4))
    Tau = rng.uniform(0.2, 2.0, size=(6, 3))
    spec = AttackSpec(gamma=0.25, steps=7, step_size=0.09)
    batch = untargeted_attack_batch(r, Tau, X, spec, u=1.0)
    for i in range(6):
        single = untargeted_attack(r, Tau[i], X[i], spec, u=1.0)
        np.testing.assert_allclose(batch[i], single, rtol=1e-9, atol=1e-12)
    batch_t = targeted_attack_batch(r, Tau, X, 2, spec, u=1.0)
    for i in range(6):
        single = targeted_attack(r, Tau[i], X[i], 2, spec, u=1.0)
        np.testing.assert_allclose(batch_t[i], single, rtol=1e-9, atol=1e-12)


def test_batch_attack_containment():
    r = _mlp_scorer(11)
    rng = np.random.default_rng(8)
    X = rng.normal(size=(30, 4))
    Tau = rng.uniform(0.0, 2.0, size=(30, 3))
    spec = AttackSpec(gamma=0.15, steps=5, step_size=0.075)
    adv = untargeted_attack_batch(r, Tau, X, spec, u=1.0)
    assert np.all(adv >= X - 0.15) and np.all(adv <= X + 0.15)


# ---------------------------------------------------------------------------
# displacement supremum

def test_smooth_sup_nonnegative_and_deterministic():
    r = _mlp_scorer(12)
    spec = AttackSpec(gamma=0.3, steps=8, step_size=0.094)
    x = np.array([0.2, -0.4, 1.0, 0.1])
    v1 = smooth_sup(r, x, 1, spec)
    v2 = smooth_sup(r, x, 1, spec)
    assert v1 >= 0.0
    assert v1 == v2


def test_smooth_sup_index_error():
    r = _mlp_scorer(13)
    spec = AttackSpec(gamma=0.1, steps=1, step_size=0.1)
    with pytest.raises(IndexError):
        smooth_sup(r, np.zeros(4), 5, spec)


def test_smooth_sup_linear_scorer_bounded_by_corner_max():
    """For a linear scorer the true sup sits at a ball corner; the ascent value
    is a lower bound of that corner maximum, never above it."""
    spec_s = ScorerSpec(input_dim=3, output_dim=3, hidden=())
    rng = np.random.default_rng(9)
    r = Scorer(spec_s, init_params(spec_s, 14))
    W = r.theta[:9].reshape(3, 3)
    x = rng.normal(size=3)
    from robustdefer.losses import pairwise_diff_matrix
    corners = 0.2 * np.array(np.meshgrid(*([[-1, 1]] * 3))).T.reshape(-1, 3)
    for j in range(3):
        M = pairwise_diff_matrix(j, 3)
        best = max(float(np.linalg.norm(M @ W @ d)) for d in corners)
        spec = AttackSpec(gamma=0.2, steps=20, step_size=0.1)
        got = smooth_sup(r, x, j, spec)
        assert 0.0 < got <= best + 1e-9


def test_smooth_sup_rank_one_scorer_exact():
    """A rank-1 linear scorer has a single ascent direction, so the very first
    step reaches the global corner and the sup is exact."""
    rng = np.random.default_rng(10)
    u_vec = rng.normal(size=3)
    v_vec = rng.normal(size=3)
    W = np.outer(u_vec, v_vec)
    spec_s = ScorerSpec(input_dim=3, output_dim=3, hidden=())
    theta = np.zeros(spec_s.n_params)
    theta[:9] = W.reshape(-1)
    r = Scorer(spec_s, theta)
    x = rng.normal(size=3)
    from robustdefer.losses import pairwise_diff_matrix
    gamma = 0.3
    spec = AttackSpec(gamma=gamma, steps=5, step_size=2.5 * gamma / 5)
    for j in range(3):
        M = pairwise_diff_matrix(j, 3)
        # || M W d || = ||M u|| * |v . d|, maximized at gamma * ||v||_1
        want = float(np.linalg.norm(M @ u_vec) * gamma * np.abs(v_vec).sum())
        got = smooth_sup(r, x, j, spec)
        assert abs(got - want) <= 1e-9 * max(1.0, want)
