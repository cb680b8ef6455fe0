"""Command line entry point: ``unifed {train,test-external,ntk,ablate,verify}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .datagen import (holdout_split, make_feature_shift_suite, make_teacher, make_unseen_spec,
                      sample_client_dataset)
from .divergence import divergence_experiment
from .fedtest import (ReestimationConfig, ablate_batch_size, ablate_momentum, ablate_order, ablation_csv,
                      make_batches, test_external, test_external_frozen)
from .fl import AggregationConfig, FederatedError, InvariantViolation, run_federated_training
from .linalg import smallest_eigenvalue
from .nn import build_mlp, load_checkpoint, save_checkpoint, two_layer_init
from .ntk import (compare_min_eigenvalues, finite_width_limit, gram_infinity, ntk_instance, track_dynamics,
                  width_soft_check)
from .verify import run_invariant_suite

log = logging.getLogger("unifed")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# building blocks shared by the commands


def build_clients(cfg: cfgmod.ExperimentConfig):
    """Client specs, the shared teacher and ``(train, val)`` pairs."""
    d = cfg.data
    specs = make_feature_shift_suite(d.N, d.d, d.shift, d.severity, cfg.seed)
    teacher = make_teacher(d.teacher, d.d, cfg.seed, d.noise_std, binary=d.binary)
    pairs = []
    for spec in specs:
        ds = sample_client_dataset(spec, teacher, d.M, cfg.seed)
        parts = holdout_split(ds, tuple(d.split), cfg.seed)
        pairs.append((parts[0], parts[1] if len(parts) > 1 else None))
    return specs, teacher, pairs


def build_template(cfg: cfgmod.ExperimentConfig):
    m = cfg.model
    out_dim = 2 if cfg.fl.loss == "cross-entropy" else 1
    return build_mlp(cfg.data.d, tuple(int(h) for h in m.hidden), out_dim, bn=m.bn, seed=cfg.seed,
                     bn_momentum=m.bn_momentum, eps=m.eps, var_center=m.var_center)


def aggregation_config(fl: cfgmod.FLConfig) -> AggregationConfig:
    return AggregationConfig(
        strategy=fl.strategy, exclude_bn=fl.exclude_bn, client_weights=fl.client_weights,
        prox_mu=fl.prox_mu, server_lr=fl.server_lr, betas=tuple(fl.betas), adam_eps=fl.adam_eps,
        local_epochs=fl.local_epochs, local_lr=fl.local_lr, momentum=fl.momentum,
        batch_size=fl.batch_size, loss=fl.loss, participation=fl.participation,
        reset_momentum=fl.reset_momentum,
    )


def resolve_reset(cfg: cfgmod.ExperimentConfig, override: bool | None = None) -> bool:
    """Start re-estimation from scratch unless the global BN statistics were trained."""
    if override is not None:
        return override
    if cfg.test.reset_stats is not None:
        return cfg.test.reset_stats
    return cfg.fl.exclude_bn


def reestimation_config(cfg: cfgmod.ExperimentConfig, reset_stats: bool | None = None) -> ReestimationConfig:
    test = cfg.test
    return ReestimationConfig(momentum=test.momentum, batch_size=test.batch_size, order_seed=test.order_seed,
                              reset_stats=resolve_reset(cfg, reset_stats), var_center=test.var_center)


def external_dataset(cfg, specs, teacher, ext: cfgmod.ExternalSpec, index: int = 0):
    spec = make_unseen_spec(specs, ext.factor, client_id=len(specs) + index)
    return sample_client_dataset(spec, teacher, ext.M, cfg.seed + ext.seed_offset)


def threads_from(args) -> int:
    if args.threads is not None:
        return max(1, int(args.threads))
    env = os.environ.get("UNIFED_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise cfgmod.ConfigError(f"UNIFED_THREADS must be an integer, got {env!r}") from None
    return 1


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(path: Path, obj):
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_run(run_dir):
    run_dir = Path(run_dir)
    resolved = run_dir / "config.resolved.json"
    if not resolved.exists():
        raise cfgmod.ConfigError(f"{run_dir} is not a run directory (no config.resolved.json)")
    cfg = cfgmod.load_config(resolved)
    summary = json.loads((run_dir / "summary.json").read_text())
    model = load_checkpoint(run_dir / f"round_{summary['final_round']}" / "global.json")
    return cfg, summary, model


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: cfgmod.ExperimentConfig, out: Path, threads: int = 1) -> Path:
    run_dir = Path(out) / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    _write(run_dir / "config.resolved.json", cfg.to_json())
    specs, teacher, pairs = build_clients(cfg)
    template = build_template(cfg)
    agg = aggregation_config(cfg.fl)

    def save_round(t, global_model, client_models):
        save_checkpoint(global_model, run_dir / f"round_{t}" / "global.json")
        for i, net in enumerate(client_models):
            save_checkpoint(net, run_dir / f"round_{t}" / f"client_{i}.json")

    def on_round(rm, server, clients):
        save_round(rm.round, server.model, [c.model for c in clients])

    run = run_federated_training(pairs, template, agg, cfg.fl.T, cfg.seed, threads=threads,
                                 invariant_checks=cfg.fl.invariant_checks,
                                 on_round=on_round if cfg.fl.checkpoints == "every" else None)
    _write(run_dir / "metrics.csv", run.metrics_csv())
    save_round(cfg.fl.T, run.server.model, [c.model for c in run.clients])
    if run.best_round != cfg.fl.T and cfg.fl.checkpoints != "every":
        best_global = template.copy()
        best_global.load_state_dict(run.best_global)
        best_clients = []
        for state in run.best_clients:
            net = template.copy()
            net.load_state_dict(state)
            best_clients.append(net)
        save_round(run.best_round, best_global, best_clients)

    last = run.metrics[-1]
    summary = {
        "run_id": cfg.run_id,
        "seed": cfg.seed,
        "final_round": cfg.fl.T,
        "best_round": run.best_round,
        "final_mean_train_loss": last.mean_train_loss,
        "final_train_loss": {str(k): v for k, v in last.train_loss.items()},
        "final_val_loss": {str(k): v for k, v in last.val_loss.items()},
        "final_val_accuracy": {str(k): v for k, v in last.val_accuracy.items()},
    }
    _dump(run_dir / "summary.json", summary)
    log.info("trained %s: final mean train loss %.4g, best round %d", cfg.run_id, last.mean_train_loss, run.best_round)
    return run_dir


def cmd_test_external(run_dir, factor: float | None = None, samples: int | None = None,
                      reset_stats: bool | None = None) -> list:
    run_dir = Path(run_dir)
    cfg, _, model = load_run(run_dir)
    specs, teacher, pairs = build_clients(cfg)
    loss = cfg.fl.loss
    rcfg = reestimation_config(cfg, reset_stats)
    written = []
    externals = list(cfg.test.external)
    if factor is not None or samples is not None:
        base = externals[0] if externals else cfgmod.ExternalSpec()
        externals = [cfgmod.ExternalSpec(factor if factor is not None else base.factor,
                                         samples if samples is not None else base.M, base.seed_offset)]
    for k, ext in enumerate(externals):
        data = external_dataset(cfg, specs, teacher, ext, k)
        batches = make_batches(data, rcfg.batch_size, rcfg.order_seed)
        frozen = test_external_frozen(model, batches, loss)
        reest = test_external(model, batches, rcfg, loss)
        doc = {
            "external": {"factor": ext.factor, "M": ext.M, "seed_offset": ext.seed_offset},
            "reestimation": {"momentum": rcfg.momentum, "batch_size": rcfg.batch_size,
                             "order_seed": rcfg.order_seed, "reset_stats": rcfg.reset_stats,
                             "var_center": rcfg.var_center},
            "n_samples": frozen.n_samples,
            "arms": {"frozen": frozen.to_dict(), "reestimated": reest.to_dict()},
        }
        path = run_dir / f"external_{k}.json"
        _dump(path, doc)
        written.append(path)
        if cfg.analysis.divergence:
            report = divergence_experiment(model, [tr for tr, _ in pairs], data, rcfg)
            _write(run_dir / f"divergence_{k}.csv", report.to_csv())
            _write(run_dir / f"divergence_{k}.json", report.to_json(indent=2) + "\n")
            written.append(run_dir / f"divergence_{k}.csv")
        log.info("external %d: frozen acc %s, re-estimated acc %s", k, frozen.accuracy, reest.accuracy)
    return written


def cmd_ntk(cfg: cfgmod.ExperimentConfig, out: Path) -> Path:
    n = cfg.ntk
    run_dir = Path(out) / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    _write(run_dir / "config.resolved.json", cfg.to_json())
    X, cids, covs, y = ntk_instance(n.N, n.M, n.d, cfg.seed, n.shift, n.severity)
    report = gram_infinity(X, cids, n.alpha, n.estimator, n.mc_samples, cfg.seed)
    verdict = compare_min_eigenvalues(report)
    e0_limits = {v: smallest_eigenvalue(finite_width_limit(X, cids, covs, seed=cfg.seed, variant=v)[0])
                 for v in ("aggregated", "client_specific")}
    doc = report.to_dict()
    doc["ordering"] = {"holds": verdict.ordering_holds, "block_identity_holds": verdict.block_identity_holds,
                       "block_min": verdict.block_min, "block_identity_error": verdict.block_identity_error}
    doc["e0_finite_width_limit"] = e0_limits
    _dump(run_dir / "gram_report.json", doc)
    traces = {}
    for variant, shared in (("aggregated", True), ("client_specific", False)):
        model = two_layer_init(n.m, n.d, n.N, n.alpha, cfg.seed, covs, shared=shared)
        trace, _ = track_dynamics(model, X, cids, y, n.steps, n.lr)
        _write(run_dir / f"dynamics_{variant}.csv", trace.to_csv())
        _write(run_dir / f"dynamics_{variant}.json", trace.to_json() + "\n")
        e0 = report.e0 if shared else report.e0_star
        frac, flagged = width_soft_check(trace, e0_limits[variant])
        frac_lit, flagged_lit = width_soft_check(trace, e0)
        traces[variant] = {"fraction_at_least_half_e0_limit": frac, "flagged": flagged,
                           "fraction_at_least_half_e0_kernel": frac_lit, "flagged_kernel": flagged_lit,
                           "final_loss": trace.loss[-1], "steps_to_0.01": trace.first_step_below(0.01)}
    _dump(run_dir / "ntk_summary.json", {"e0": report.e0, "e0_star": report.e0_star,
                                         "e0_finite_width_limit": e0_limits, "traces": traces})
    return run_dir


def cmd_ablate(run_dir, which: str, grid=None, reset_stats: bool | None = None) -> Path:
    run_dir = Path(run_dir)
    cfg, _, model = load_run(run_dir)
    specs, teacher, _ = build_clients(cfg)
    ext = cfg.test.external[0] if cfg.test.external else cfgmod.ExternalSpec()
    data = external_dataset(cfg, specs, teacher, ext, 0)
    reset = resolve_reset(cfg, reset_stats)
    loss = cfg.fl.loss
    if which == "batch":
        rows = ablate_batch_size(model, data, grid or cfg.test.batch_sizes, cfg.seed, loss, reset)
    elif which == "momentum":
        rows = ablate_momentum(model, data, grid or cfg.test.taus, cfg.test.batch_size, cfg.seed, loss, reset)
    elif which == "order":
        n_orders = int(grid[0]) if grid else cfg.test.n_orders
        rows = ablate_order(model, data, n_orders, cfg.seed, cfg.test.momentum, cfg.test.batch_size, loss, reset)
    else:
        raise cfgmod.ConfigError(f"unknown ablation {which!r}")
    path = run_dir / f"ablation_{which}.csv"
    _write(path, ablation_csv(rows))
    return path


def cmd_verify(threads=(1, 4, 8), quick: bool = True, seed: int = 0) -> list:
    """Built-in protocol invariant suite; returns ``(name, passed, detail)`` triples."""
    return run_invariant_suite(threads=threads, quick=quick, seed=seed)


# ---------------------------------------------------------------------------
# argument handling


def _grid(text):
    if text is None:
        return None
    try:
        return [float(v) if "." in v else int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; expected comma-separated numbers") from None


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unifed", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True, help="experiment JSON")
            sp.add_argument("--out", default="runs", help="parent directory for run outputs")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")

    common(sub.add_parser("train", help="federated training"))
    te = sub.add_parser("test-external", help="frozen vs re-estimated testing on external clients")
    common(te, needs_config=False)
    te.add_argument("--run", required=True, help="run directory written by train")
    te.add_argument("--factor", type=float, help="external covariance factor (overrides the config)")
    te.add_argument("--samples", type=int, help="external sample count (overrides the config)")
    te.add_argument("--reset-stats", action=argparse.BooleanOptionalAction, default=None)
    common(sub.add_parser("ntk", help="Gram matrices and training dynamics of the two-layer model"))
    ab = sub.add_parser("ablate", help="test-time re-estimation ablations")
    common(ab, needs_config=False)
    ab.add_argument("--run", required=True)
    ab.add_argument("--which", required=True, choices=("batch", "momentum", "order"))
    ab.add_argument("--grid", type=_grid, help="comma-separated values (order: number of orders)")
    ab.add_argument("--reset-stats", action=argparse.BooleanOptionalAction, default=None)
    vf = sub.add_parser("verify", help="run the built-in invariant suite")
    common(vf, needs_config=False)
    vf.add_argument("--full", action="store_true", help="longer runs")
    return p


def _load(args):
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    return cfg


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = threads_from(args)
        if args.command == "train":
            run_dir = cmd_train(_load(args), Path(args.out), threads)
            print(run_dir)
        elif args.command == "test-external":
            for path in cmd_test_external(args.run, args.factor, args.samples, args.reset_stats):
                print(path)
        elif args.command == "ntk":
            print(cmd_ntk(_load(args), Path(args.out)))
        elif args.command == "ablate":
            print(cmd_ablate(args.run, args.which, args.grid, args.reset_stats))
        elif args.command == "verify":
            counts = (1, 4, 8) if args.threads is None else tuple(sorted({1, threads}))
            results = cmd_verify(counts, quick=not args.full, seed=args.seed or 0)
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
            return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAIL
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, FederatedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
