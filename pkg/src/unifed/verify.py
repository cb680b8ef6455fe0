"""Built-in protocol invariant suite run by ``unifed verify``."""

from __future__ import annotations

import numpy as np

from .datagen import holdout_split, make_feature_shift_suite, make_teacher, sample_client_dataset
from .fl import AggregationConfig, InvariantViolation, run_federated_training
from .nn import build_mlp


def invariant_problem(seed: int = 0, N: int = 3, d: int = 8, M: int = 64):
    specs = make_feature_shift_suite(N, d, "scale", 3.0, seed)
    teacher = make_teacher("linear-classification", d, seed)
    pairs = []
    for spec in specs:
        tr, va = holdout_split(sample_client_dataset(spec, teacher, M, seed), (0.8, 0.2), seed)
        pairs.append((tr, va))
    return pairs, build_mlp(d, (16, 16), 2, seed=seed)


def _max_state_diff(a, b) -> float:
    return max(float(np.max(np.abs(a[k] - b[k]))) if a[k].size else 0.0 for k in a)


def run_invariant_suite(threads=(1, 4, 8), quick: bool = True, seed: int = 0) -> list:
    """``(name, passed, detail)`` for invariants (a) to (d)."""
    T = 5 if quick else 20
    pairs, template = invariant_problem(seed)
    base = dict(local_lr=0.05, batch_size=16)
    out = []

    # (a) and (b) are checked inside every round by the training loop.
    try:
        run_federated_training(pairs, template, AggregationConfig(exclude_bn=True, **base), T, seed,
                               invariant_checks=True)
        out.append(("bn_exclusion", True, f"client BN untouched by broadcast over {T} rounds"))
        out.append(("fedavg_weighted_mean", True, "aggregated non-BN tensors equal the weighted mean to 1e-12"))
    except InvariantViolation as exc:
        out.append(("bn_exclusion_and_weighted_mean", False, str(exc)))

    # (c) equivalences.
    ref = run_federated_training(pairs, template, AggregationConfig(strategy="fedavg", **base), T, seed)
    prox = run_federated_training(pairs, template, AggregationConfig(strategy="fedprox", prox_mu=0.0, **base), T, seed)
    nova = run_federated_training(pairs, template, AggregationConfig(strategy="fednova", **base), T, seed)
    g = ref.server.model.state_dict()
    e_prox = _max_state_diff(g, prox.server.model.state_dict())
    e_nova = _max_state_diff(g, nova.server.model.state_dict())
    out.append(("fedprox_mu0_equals_fedavg", e_prox <= 1e-10, f"max deviation {e_prox:.3e}"))
    out.append(("fednova_equal_steps_equals_fedavg", e_nova <= 1e-10, f"max deviation {e_nova:.3e}"))

    # (d) thread-count independence.
    csvs = {}
    for k in threads:
        run = run_federated_training(pairs, template, AggregationConfig(**base), T, seed, threads=k)
        csvs[k] = run.metrics_csv()
    same = len(set(csvs.values())) == 1
    out.append(("thread_determinism", same,
                f"metrics CSV {'identical' if same else 'differs'} at threads {sorted(csvs)}"))
    return out
