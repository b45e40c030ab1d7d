"""End-to-end acceptance gate.

One test per release criterion; each prints a `[criterion N] name: PASS/FAIL`
line (visible with -v plus -s, or in failure output) and enforces the stated
tolerances and runtime budgets. The housing reproduction needs the dataset CSV
on disk and is skipped, with a pointer to the README fetch step, when absent.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from robustdefer.attacks import (
    AttackSpec,
    L_INF,
    L_TWO,
    pgd,
    targeted_attack_batch,
    untargeted_attack_batch,
)
from robustdefer.bench import (
    default_housing_path,
    housing_config,
    run_experiment,
    synthetic_config,
)
from robustdefer.core import aggregate_costs, aggregate_matrix, true_deferral_loss
from robustdefer.losses import psi_rho, psi_u
from robustdefer.oracle import (
    random_problem,
    verify_deferral_bound,
    verify_pointwise_bound,
)
from robustdefer.scorer import (
    Scorer,
    ScorerSpec,
    backward_batch,
    forward_batch_cached,
    init_params,
)
from robustdefer.trainer import TrainConfig, train_sard


def _criterion(n, name, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[criterion {n}] {name}: {tag}{suffix}")
    assert ok, f"criterion {n} {name} failed: {detail}"


# ---------------------------------------------------------------------------

def test_criterion_1_deferral_identity():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        J = int(rng.integers(0, 6))
        c = rng.uniform(0.0, 2.0, size=J + 1)
        tau = aggregate_costs(c).tau
        for chosen in range(J + 1):
            miss = np.ones(J + 1)
            miss[chosen] = 0.0
            via_tau = float(tau @ miss + (1 - J) * c.sum())
            worst = max(worst, abs(true_deferral_loss(c, chosen) - via_tau))
    elapsed = time.perf_counter() - start
    _criterion(1, "deferral identity", worst <= 1e-12 and elapsed < 1.0,
               f"worst gap {worst:.2e}, {elapsed:.2f}s")


def test_criterion_2_transform_values():
    checks = [
        abs(psi_u(1.0, 1.0) - math.log(2.0)),
        abs(psi_u(3.0, 0.5) - 2.0),
        abs(psi_u(1.0, 2.0) - 0.5),
        abs(psi_rho(-0.25, 1.0) - 1.0),
        abs(psi_rho(0.5, 1.0) - 0.5),
        abs(psi_rho(1.0, 1.0) - 0.0),
        abs(psi_rho(7.0, 1.0) - 0.0),
        abs(psi_rho(0.25, 0.5) - 0.5),
    ]
    worst = max(checks)
    _criterion(2, "transform values", worst <= 1e-12, f"worst gap {worst:.2e}")


def _off_kink_draw(rng, spec, theta):
    # reject draws with a hidden unit barely active: finite differences would
    # straddle its rectifier kink (dead units are fine — flat on both sides)
    for _ in range(50):
        x = rng.normal(size=(1, spec.input_dim))
        _, acts = forward_batch_cached(spec, theta, x)
        if all(not np.any((z > 0.0) & (z < 1e-4)) for z in acts[1:-1]):
            return x
    raise AssertionError("could not draw inputs away from activation kinks")


def test_criterion_3_gradient_oracle():
    rng = np.random.default_rng(1)
    shapes = [(), (5,), (4, 3), ()]
    start = time.perf_counter()
    worst = 0.0
    h = 1e-6
    for trial in range(100):
        spec = ScorerSpec(input_dim=int(rng.integers(2, 5)),
                          output_dim=int(rng.integers(2, 5)),
                          hidden=shapes[trial % len(shapes)])
        theta = init_params(spec, int(rng.integers(0, 2 ** 31)))
        x = _off_kink_draw(rng, spec, theta)
        up = rng.normal(size=(1, spec.output_dim))
        _, acts = forward_batch_cached(spec, theta, x)
        G, _ = backward_batch(spec, theta, acts, up, want_input=False)
        F = np.zeros_like(G)
        for k in range(theta.size):
            tp, tm = theta.copy(), theta.copy()
            tp[k] += h
            tm[k] -= h
            F[k] = ((forward_batch_cached(spec, tp, x)[0] * up).sum()
                    - (forward_batch_cached(spec, tm, x)[0] * up).sum()) / (2 * h)
        rel = float(np.linalg.norm(G - F) / max(np.linalg.norm(F), 1.0))
        worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    _criterion(3, "gradient oracle", worst < 1e-4 and elapsed < 10.0,
               f"worst rel err {worst:.2e}, {elapsed:.1f}s over 100 configs")


def test_criterion_4_attack_soundness():
    rng = np.random.default_rng(2)
    count = 0
    contained = True
    for batch in range(10):
        d, A = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        spec = ScorerSpec(input_dim=d, output_dim=A,
                          hidden=(4,) if batch % 2 else ())
        r = Scorer(spec, init_params(spec, batch))
        X = rng.normal(size=(50, d))
        Tau = aggregate_matrix(rng.uniform(0.0, 2.0, size=(50, A)))
        gamma = float(rng.uniform(0.05, 0.5))
        p = L_INF if batch % 2 else L_TWO
        atk = AttackSpec(gamma=gamma, steps=5, step_size=0.5 * gamma, p=p)
        for Xa in (untargeted_attack_batch(r, Tau, X, atk, 1.0),
                   targeted_attack_batch(r, Tau, X, 1, atk, 1.0)):
            count += Xa.shape[0]
            if p == L_INF:
                # exact: inside the clamp interval the projection enforces
                contained &= bool(np.all((Xa >= X - gamma) & (Xa <= X + gamma)))
            else:
                contained &= bool(np.all(
                    np.linalg.norm(Xa - X, axis=1) <= gamma * (1 + 1e-12)))

    # one-step closed form, bit for bit, on linear objectives
    bitwise = True
    for _ in range(50):
        d = int(rng.integers(2, 6))
        g = rng.normal(size=d)
        g[rng.random(d) < 0.2] = 0.0
        x0 = rng.normal(size=d)
        gamma = float(rng.uniform(0.05, 0.4))

        def obj(x, g=g):
            return float(g @ x), g.copy()

        atk = AttackSpec(gamma=gamma, steps=1, step_size=2.5 * gamma)
        up = pgd(obj, x0, atk, "maximize")
        want = x0 + gamma * np.sign(g)
        bitwise &= up.tobytes() == want.tobytes()
    _criterion(4, "attack soundness", count >= 1000 and contained and bitwise,
               f"{count} attacks contained, 1-step closed form bitwise")


def test_criterion_5_consistency_bounds():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    violations = 0
    inconclusive = 0
    for i in range(100):
        problem = random_problem(rng, max_agents=4, max_points=5, max_ball=4)
        for fn in (verify_pointwise_bound, verify_deferral_bound):
            report = fn(problem, trials=1, seed=1000 + i, tol=1e-9)
            violations += report["violations"]
            inconclusive += report["inconclusive"]
    elapsed = time.perf_counter() - start
    _criterion(5, "consistency bounds",
               violations == 0 and inconclusive == 0 and elapsed < 300.0,
               f"100 instances, {violations} violations, "
               f"{inconclusive} inconclusive, {elapsed:.0f}s")


def test_criterion_6_epoch_ledger():
    rng = np.random.default_rng(4)
    n, A, T = 100, 3, 10
    X = rng.normal(size=(n, 5))
    C = rng.uniform(0.0, 2.0, size=(n, A))
    spec = ScorerSpec(input_dim=5, output_dim=A, hidden=(6,))
    cfg = TrainConfig(epochs=1, batch_size=32, learning_rate=1e-3,
                      val_fraction=0.0,
                      attack=AttackSpec(gamma=0.1, steps=T, step_size=0.025))
    _, _, ledger = train_sard(X, None, C, spec, cfg)
    ok = ledger.forward_count == 3100 and ledger.backward_count == 3100
    _criterion(6, "epoch ledger", ok,
               f"forward {ledger.forward_count}, backward {ledger.backward_count}")


def test_criterion_7_housing_reproduction():
    csv_path = Path(default_housing_path())
    if not csv_path.exists():
        pytest.skip(f"housing CSV not found at {csv_path}: run the one-off "
                    "fetch step in the README (Data section) first")
    start = time.perf_counter()
    report = run_experiment(housing_config(trials=4))
    elapsed = time.perf_counter() - start
    base = report["results"]["baseline"]
    sard = report["results"]["sard"]
    base_clean = base["clean"]["mean"]
    sard_clean = sard["clean"]["mean"]
    attacked = [sard[k]["mean"] for k in report["modes"] if k != "clean"]
    checks = {
        "baseline clean in 0.17±0.03": abs(base_clean - 0.17) <= 0.03,
        "sard clean in 0.17±0.03": abs(sard_clean - 0.17) <= 0.03,
        "sard attacked <= clean+0.03": max(attacked) <= sard_clean + 0.03,
        "baseline targeted:1 >= 1.5x clean":
            base["targeted:1"]["mean"] >= 1.5 * base_clean,
        "under 15 min": elapsed < 900.0,
    }
    detail = (f"base {base_clean:.3f}, sard {sard_clean:.3f}, sard attacked max "
              f"{max(attacked):.3f}, base targeted:1 {base['targeted:1']['mean']:.3f}, "
              f"{elapsed:.0f}s")
    _criterion(7, "housing reproduction", all(checks.values()),
               detail + "".join(f"; FAILED {k}" for k, v in checks.items() if not v))


def test_criterion_8_synthetic_ordinal():
    start = time.perf_counter()
    report = run_experiment(synthetic_config(seed=0))
    elapsed = time.perf_counter() - start
    base = report["results"]["baseline"]
    sard = report["results"]["sard"]
    weak = report["n_agents"] - 1  # the narrow-coverage expert is last
    base_share_clean = base["clean"]["deferral_shares"]["mean"][weak]
    base_share_hit = base[f"targeted:{weak}"]["deferral_shares"]["mean"][weak]
    sard_share_clean = sard["clean"]["deferral_shares"]["mean"][weak]
    sard_share_hit = sard[f"targeted:{weak}"]["deferral_shares"]["mean"][weak]
    ratio = sard_share_hit / max(sard_share_clean, 1e-12)
    checks = {
        "clean accuracy within 3 points":
            base["clean"]["mean"] >= sard["clean"]["mean"] - 0.03,
        "untargeted gap >= 15 points":
            sard["untargeted"]["mean"] >= base["untargeted"]["mean"] + 0.15,
        "baseline weak share doubled":
            base_share_hit >= 2.0 * base_share_clean,
        "sard weak share stable": max(ratio, 1.0 / ratio) < 1.2,
        "under 10 min": elapsed < 600.0,
    }
    detail = (f"clean {base['clean']['mean']:.3f}/{sard['clean']['mean']:.3f}, "
              f"untargeted {base['untargeted']['mean']:.3f}/"
              f"{sard['untargeted']['mean']:.3f}, weak share "
              f"{base_share_clean:.3f}->{base_share_hit:.3f} vs "
              f"{sard_share_clean:.3f}->{sard_share_hit:.3f}, {elapsed:.0f}s")
    _criterion(8, "synthetic ordinal", all(checks.values()),
               detail + "".join(f"; FAILED {k}" for k, v in checks.items() if not v))


def _strip_timestamp(text: str) -> str:
    return "\n".join(line for line in text.splitlines()
                     if not line.lstrip().startswith('"timestamp"'))


def test_criterion_9_determinism(tmp_path):
    cfg = synthetic_config(
        trials=1, seed=7, n_classes=6, dim=8, n_train=400, n_test=200,
        rejector_hidden=(8,), baseline_epochs=8, sard_epochs=8,
        model_hidden=(8,), model_epochs=10, model_train_count=120,
        batch_size=128, attack_steps=5)
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(cfg, out_dir=a)
    run_experiment(cfg, out_dir=b)
    json_same = (_strip_timestamp((a / "report.json").read_text())
                 == _strip_timestamp((b / "report.json").read_text()))
    csv_same = (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    # sanity: the stripped text still carries the actual numbers
    assert "results" in json.loads((a / "report.json").read_text())
    _criterion(9, "determinism", json_same and csv_same,
               "reports byte-identical with timestamps excluded")
