"""Command-line entry points: verify, train, attack, evaluate, report.

Configs are YAML documents mirroring bench.ExperimentConfig; unknown keys are
rejected before any work starts. Exit codes: 0 on success, 1 on configuration
or runtime errors, 2 when a verification suite detects a violation.

Heavy imports happen inside the command handlers so that --threads can cap the
BLAS pools before the numeric stack loads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


class ConfigError(ValueError):
    """A config document failed validation."""


class _Parser(argparse.ArgumentParser):
    # argument mistakes are runtime errors (exit 1); 2 is reserved for violations
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


_TUPLE_FIELDS = {"methods", "rejector_hidden", "model_hidden", "expert_hidden"}


def _experiment_fields():
    from dataclasses import fields

    from .bench import ExperimentConfig
    return {f.name for f in fields(ExperimentConfig)}


def load_config(path, *, seed_override=None):
    """Parse and strictly validate a YAML experiment config.

    Returns (ExperimentConfig, method-or-None); the optional top-level `method`
    key picks the trainer for single-run commands.
    """
    import yaml

    from .bench import ExperimentConfig
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    method = doc.pop("method", None)
    if method is not None and method not in ("baseline", "sard"):
        raise ConfigError(f"{path}: method must be baseline or sard, got {method!r}")
    allowed = _experiment_fields()
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
    if "task" not in doc:
        raise ConfigError(f"{path}: config must set task")
    for key in _TUPLE_FIELDS & set(doc):
        doc[key] = tuple(doc[key])
    if seed_override is not None:
        doc["seed"] = seed_override
    try:
        return ExperimentConfig(**doc), method
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def _versions() -> dict:
    import matplotlib
    import numpy
    import yaml

    from . import __version__
    return {
        "python": ".".join(str(v) for v in sys.version_info[:3]),
        "robustdefer": __version__,
        "numpy": numpy.__version__,
        "matplotlib": matplotlib.__version__,
        "pyyaml": yaml.__version__,
    }


def _write_manifest(out_dir: Path, command: str, config_digest, seed) -> None:
    manifest = {
        "command": command,
        "config_digest": config_digest,
        "seed": seed,
        "versions": _versions(),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup_trial(config, trial: int):
    from .bench import _housing_trial_setup, _synthetic_trial_setup
    setup = _housing_trial_setup if config.task == "housing" else _synthetic_trial_setup
    return setup(config, trial)


# ---------------------------------------------------------------------------
# verify

def _verify_identities(trials: int, seed: int):
    import numpy as np

    from .core import aggregate_costs, true_deferral_loss
    from .losses import adversarial_true_deferral_loss
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        J = int(rng.integers(0, 6))
        c = rng.uniform(0.0, 2.0, size=J + 1)
        tau = aggregate_costs(c).tau
        for chosen in range(J + 1):
            miss = np.ones(J + 1)
            miss[chosen] = 0.0
            direct = true_deferral_loss(c, chosen)
            via_tau = adversarial_true_deferral_loss(c, tau, miss)
            worst = max(worst, abs(direct - via_tau))
    return {"checks": trials * 1, "worst": worst, "passed": worst <= 1e-12}


def _verify_gradients(trials: int, seed: int):
    import numpy as np

    from .losses import comp_sum_grads, comp_sum_values
    from .scorer import ScorerSpec, backward_batch, forward_batch_cached, init_params
    rng = np.random.default_rng(seed)
    h = 1e-6
    worst = 0.0
    for trial in range(trials):
        A = int(rng.integers(2, 6))
        u = float(rng.choice([0.5, 1.0, 2.0]))
        if trial % 2 == 0:
            S = rng.normal(0.0, 2.0, size=(1, A))
            G = comp_sum_grads(S, u)[0]
            F = np.zeros_like(G)
            for j in range(A):
                for k in range(A):
                    Sp, Sm = S.copy(), S.copy()
                    Sp[0, k] += h
                    Sm[0, k] -= h
                    F[j, k] = (comp_sum_values(Sp, u)[0, j]
                               - comp_sum_values(Sm, u)[0, j]) / (2 * h)
        else:
            spec = ScorerSpec(input_dim=3, output_dim=A, hidden=(5,))
            theta = init_params(spec, rng.integers(0, 2 ** 31))
            x = rng.normal(size=(1, 3))
            up = rng.normal(size=(1, A))
            _, acts = forward_batch_cached(spec, theta, x)
            G, _ = backward_batch(spec, theta, acts, up, want_input=False)
            F = np.zeros_like(G)
            for k in range(theta.size):
                tp, tm = theta.copy(), theta.copy()
                tp[k] += h
                tm[k] -= h
                F[k] = ((forward_batch_cached(spec, tp, x)[0] * up).sum()
                        - (forward_batch_cached(spec, tm, x)[0] * up).sum()) / (2 * h)
        rel = np.linalg.norm(G - F) / max(np.linalg.norm(F), 1.0)
        worst = max(worst, float(rel))
    return {"checks": trials, "worst": worst, "passed": worst < 1e-4}


def _verify_bounds(trials: int, seed: int):
    import numpy as np

    from .oracle import random_problem, verify_deferral_bound, verify_pointwise_bound
    rng = np.random.default_rng(seed)
    entries = []
    violations = 0
    inconclusive = 0
    worst = float("inf")
    for i in range(trials):
        problem = random_problem(rng)
        for kind, fn in (("pointwise", verify_pointwise_bound),
                         ("deferral", verify_deferral_bound)):
            rep = fn(problem, trials=1, seed=seed + 7919 * i)
            entry = dict(rep["trials"][0])
            entry.update({"instance": i, "kind": kind})
            entries.append(entry)
            violations += rep["violations"]
            inconclusive += rep["inconclusive"]
            worst = min(worst, entry["margin"])
    return {"checks": 2 * trials, "worst": worst, "passed": violations == 0,
            "violations": violations, "inconclusive": inconclusive,
            "trial_reports": entries}


def cmd_verify(args) -> int:
    suites = ("identities", "gradients", "bounds")
    if args.suite not in suites + ("all",):
        sys.stderr.write(f"usage: robustdefer verify --suite {{{','.join(suites + ('all',))}}}\n"
                         f"error: unknown suite {args.suite!r}\n")
        return 1
    seed = args.seed if args.seed is not None else 0
    defaults = {"identities": 1000, "gradients": 100, "bounds": 100}
    selected = suites if args.suite == "all" else (args.suite,)
    results = {}
    for name in selected:
        trials = args.trials if args.trials is not None else defaults[name]
        fn = {"identities": _verify_identities, "gradients": _verify_gradients,
              "bounds": _verify_bounds}[name]
        results[name] = fn(trials, seed)
    width = max(len(s) for s in selected)
    print(f"{'suite':<{width}}  {'checks':>6}  {'worst':>12}  status")
    failed = False
    for name in selected:
        r = results[name]
        status = "pass" if r["passed"] else "FAIL"
        failed = failed or not r["passed"]
        extra = ""
        if r.get("inconclusive"):
            extra = f"  ({r['inconclusive']} inconclusive)"
        print(f"{name:<{width}}  {r['checks']:>6}  {r['worst']:>12.3e}  {status}{extra}")
    if args.out:
        out = _out_dir(args)
        payload = {name: {k: v for k, v in r.items()} for name, r in results.items()}
        with open(out / "verify_report.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 2 if failed else 0


# ---------------------------------------------------------------------------
# train / attack / evaluate / report

def cmd_train(args) -> int:
    from .bench import _rejector_config, _trial_seeds, config_digest
    from .core import cost_matrix
    from .scorer import ScorerSpec, save_checkpoint
    from .trainer import train_baseline, train_sard
    config, cfg_method = load_config(args.config, seed_override=args.seed)
    method = args.method or cfg_method
    if method is None:
        raise ConfigError("no method given: set `method:` in the config or pass --method")
    out = _out_dir(args)
    pool, X_train, y_train_kw, _, _ = _setup_trial(config, args.trial)
    C_train = cost_matrix(pool, X_train, **y_train_kw)
    spec = ScorerSpec(input_dim=X_train.shape[1], output_dim=pool.n_agents,
                      hidden=config.rejector_hidden)
    tc = _rejector_config(config, method, _trial_seeds(config, args.trial, 4)[3])
    if method == "sard":
        rejector, history, ledger = train_sard(X_train, pool, C_train, spec, tc)
    else:
        rejector, history = train_baseline(X_train, pool, C_train, spec, tc)
        ledger = history.ledger
    digest = config_digest(config)
    save_checkpoint(out / "checkpoint.json", rejector, extra={
        "method": method,
        "task": config.task,
        "trial": args.trial,
        "config_digest": digest,
        "ledger": {"forward": ledger.forward_count, "backward": ledger.backward_count},
    })
    history.write_csv(out / "history.csv")
    _write_manifest(out, "train", digest, config.seed)
    print(f"trained {method} rejector for {config.task}: best epoch "
          f"{history.best_epoch}, checkpoint {out / 'checkpoint.json'}")
    return 0


def _load_rejector(path):
    from .scorer import load_checkpoint
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _evaluate_modes(config, rejector, trial, modes):
    from .bench import _attack_spec, _mode_key
    from .core import cost_matrix
    from .trainer import evaluate
    pool, _, _, X_test, y_test_kw = _setup_trial(config, trial)
    C_test = cost_matrix(pool, X_test, **y_test_kw)
    attack = _attack_spec(config)
    out = {}
    for mode, target in modes:
        m = evaluate(rejector, X_test, pool, C_test, **y_test_kw, attack_mode=mode,
                     attack=attack, u=config.u, target=target)
        out[_mode_key(mode, target)] = {
            "metric": m.metric,
            "mean_cost": m.mean_cost,
            "deferral_shares": m.deferral_shares.tolist(),
            "target": target,
        }
    return pool.n_agents, out


def cmd_attack(args) -> int:
    from .bench import config_digest
    from .trainer import TARGETED, UNTARGETED
    config, _ = load_config(args.config, seed_override=args.seed)
    rejector, extra = _load_rejector(args.checkpoint)
    if args.mode == "targeted" and args.target is None:
        raise ConfigError("targeted mode needs --target")
    mode = UNTARGETED if args.mode == "untargeted" else TARGETED
    target = args.target if mode == TARGETED else None
    trial = extra.get("trial", args.trial)
    _, results = _evaluate_modes(config, rejector, trial, [(mode, target)])
    out = _out_dir(args)
    key = next(iter(results))
    report = {
        "task": config.task,
        "method": extra.get("method"),
        "metric": "rmse" if config.task == "housing" else "accuracy",
        "mode": key,
        "config_digest": config_digest(config),
        "result": results[key],
    }
    with open(out / "attack_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "attack", report["config_digest"], config.seed)
    print(f"{key} attack on {config.task}: {report['metric']} "
          f"{results[key]['metric']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .bench import _mode_list, config_digest
    config, _ = load_config(args.config, seed_override=args.seed)
    rejector, extra = _load_rejector(args.checkpoint)
    trial = extra.get("trial", args.trial)
    n_agents, results = _evaluate_modes(config, rejector, trial,
                                        _mode_list(rejector.spec.output_dim))
    out = _out_dir(args)
    digest = config_digest(config)
    report = {
        "task": config.task,
        "method": extra.get("method"),
        "metric": "rmse" if config.task == "housing" else "accuracy",
        "seed": config.seed,
        "trial": trial,
        "config_digest": digest,
        "n_agents": n_agents,
        "modes": list(results),
        "results": results,
        "ledger": extra.get("ledger", {"forward": 0, "backward": 0}),
    }
    with open(out / "evaluation_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "evaluate", digest, config.seed)
    print(f"evaluated {report['method'] or 'rejector'} on {config.task}: clean "
          f"{report['metric']} {results['clean']['metric']:.4f}")
    return 0


def cmd_report(args) -> int:
    import numpy as np

    from .bench import write_report_csv, write_report_json
    from .figures import save_deferral_shares, save_metrics_by_mode
    runs = []
    for d in args.runs:
        p = Path(d) / "evaluation_report.json"
        if not p.exists():
            raise FileNotFoundError(f"evaluation report not found: {p}")
        with open(p) as fh:
            runs.append(json.load(fh))
    tasks = {r["task"] for r in runs}
    if len(tasks) != 1:
        raise ConfigError(f"run dirs mix tasks: {sorted(tasks)}")
    mode_lists = {tuple(r["modes"]) for r in runs}
    if len(mode_lists) != 1:
        raise ConfigError("run dirs evaluated different mode sets")
    modes = list(mode_lists.pop())
    methods = sorted({r["method"] or "rejector" for r in runs})
    results = {}
    ledger_totals = {}
    for method in methods:
        mine = [r for r in runs if (r["method"] or "rejector") == method]
        results[method] = {}
        ledger_totals[method] = {
            "forward": sum(r["ledger"]["forward"] for r in mine),
            "backward": sum(r["ledger"]["backward"] for r in mine),
        }
        for key in modes:
            vals = np.array([r["results"][key]["metric"] for r in mine])
            share = np.array([r["results"][key]["deferral_shares"] for r in mine])
            results[method][key] = {
                "mean": float(vals.mean()),
                "std": float(vals.std()),
                "per_trial": [float(v) for v in vals],
                "deferral_shares": {
                    "mean": [float(s) for s in share.mean(axis=0)],
                    "per_trial": share.tolist(),
                },
            }
    report = {
        "task": tasks.pop(),
        "metric": runs[0]["metric"],
        "modes": modes,
        "n_runs": len(runs),
        "config_digests": sorted({r["config_digest"] for r in runs}),
        "results": results,
        "ledger_totals": ledger_totals,
    }
    out = _out_dir(args)
    write_report_json(out / "report.json", report)
    write_report_csv(out / "report.csv", report)
    save_metrics_by_mode(report, out / "metrics_by_mode.png")
    save_deferral_shares(report, out / "deferral_shares.png")
    _write_manifest(out, "report", report["config_digests"], None)
    print(f"aggregated {len(runs)} runs -> {out / 'report.json'} "
          f"(+ csv, 2 figures)")
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    g.add_argument("--out", default=None, help="output directory (default: .)")
    g.add_argument("--threads", type=int, default=None,
                   help="cap the BLAS thread pools")

    parser = _Parser(prog="robustdefer",
                     description="two-stage learning-to-defer with a robust rejector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run property suites",
                       description="Run numerical property suites; exit 2 on violation.")
    p.add_argument("--suite", default="all",
                   help="identities, gradients, bounds, or all")
    p.add_argument("--trials", type=int, default=None,
                   help="override the per-suite trial count")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("train", parents=[common], help="train a rejector")
    p.add_argument("--config", required=True, help="experiment config (YAML)")
    p.add_argument("--method", choices=("baseline", "sard"), default=None)
    p.add_argument("--trial", type=int, default=0, help="trial seed row")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", parents=[common],
                       help="attack a trained rejector and report the damage")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("untargeted", "targeted"), required=True)
    p.add_argument("--target", type=int, default=None, help="agent index to divert to")
    p.add_argument("--trial", type=int, default=0)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("evaluate", parents=[common],
                       help="evaluate a checkpoint under every attack mode")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trial", type=int, default=0)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", parents=[common],
                       help="aggregate evaluation runs into tables and figures")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.fn(args)
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return 1
    except FileNotFoundError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except (ValueError, OSError, RuntimeError) as e:
        sys.stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
