"""Federated training rounds: broadcast, local SGD, server aggregation.

Client-specific BN is a switch (``exclude_bn``) orthogonal to the
aggregation strategy: when set, BN parameters and running statistics never
leave the client and the server never overwrites them.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .nn import Network, accuracy, loss_and_grad, mlp_backward

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedprox", "scaffold", "fedadam", "fednova")
SELECTION_STREAM = 2**32 - 1       # rng stream for client sampling, disjoint from client ids


class FederatedError(RuntimeError):
    def __init__(self, message, round=None, client_id=None):
        super().__init__(message)
        self.round = round
        self.client_id = client_id


class InvariantViolation(AssertionError):
    pass


@dataclass
class AggregationConfig:
    strategy: str = "fedavg"
    exclude_bn: bool = True
    client_weights: list | None = None     # None -> uniform 1/N
    prox_mu: float = 0.01
    server_lr: float = 0.01                # fedadam only
    betas: tuple = (0.9, 0.99)
    adam_eps: float = 1e-3
    local_epochs: int = 1
    local_lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    loss: str = "cross-entropy"
    participation: float = 1.0
    reset_momentum: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")
        if not self.server_lr > 0:
            raise ValueError("server_lr must be > 0")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ValueError("local_epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must be in (0, 1]")
        if self.client_weights is not None:
            w = np.asarray(self.client_weights, dtype=float)
            if np.any(w < 0) or w.sum() <= 0:
                raise ValueError("client weights must be non-negative with a positive sum")
        self.betas = tuple(self.betas)

    def weights(self, n_clients: int) -> np.ndarray:
        if self.client_weights is None:
            return np.full(n_clients, 1.0 / n_clients)
        w = np.asarray(self.client_weights, dtype=float)
        if len(w) != n_clients:
            raise ValueError(f"{len(w)} client weights for {n_clients} clients")
        return w / w.sum()


@dataclass
class ClientState:
    client_id: int
    model: Network
    train: Dataset
    val: Dataset | None = None
    control: dict | None = None            # scaffold c_i
    momentum_buf: dict | None = None


@dataclass
class ServerState:
    model: Network
    round: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    control: dict | None = None            # scaffold c
    steps: dict = field(default_factory=dict)   # fednova: last local step count per client


@dataclass
class LocalResult:
    client_id: int
    state: dict
    n_steps: int
    local_loss: float
    control_delta: dict | None = None
    n_samples: int = 0


@dataclass
class RoundMetrics:
    round: int
    train_loss: dict
    val_loss: dict
    val_accuracy: dict
    local_loss: dict
    mean_train_loss: float
    wall_clock: float

    def rows(self, classification: bool):
        for cid in sorted(self.train_loss):
            yield [self.round, cid, "local", self.local_loss.get(cid), None]
            yield [self.round, cid, "train", self.train_loss[cid], None]
            if cid in self.val_loss:
                acc = self.val_accuracy.get(cid) if classification else None
                yield [self.round, cid, "val", self.val_loss[cid], acc]


@dataclass
class FederatedRun:
    server: ServerState
    clients: list
    config: AggregationConfig
    metrics: list
    best_round: int
    best_global: dict
    best_clients: list

    def personalized(self, client_id: int) -> Network:
        return self.clients[client_id].model

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics, self.config.loss == "cross-entropy")


def metrics_to_csv(metrics, classification: bool) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "client_id", "split", "loss", "accuracy"])
    for m in metrics:
        for row in m.rows(classification):
            writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def shared_keys(net: Network, exclude_bn: bool) -> list[str]:
    keys = list(net.state_dict())
    if exclude_bn:
        bn = net.bn_keys()
        keys = [k for k in keys if k not in bn]
    return keys


def evaluate(net: Network, data: Dataset, loss: str):
    """Eval-mode loss (and accuracy for classification) without state changes."""
    out = net.forward(data.inputs, "eval", update_stats=False)[0]
    value = loss_and_grad(out, data.labels, loss)[0]
    acc = accuracy(out, data.labels) if loss == "cross-entropy" else None
    return value, acc


def _grad_dict(net, grads):
    return {f"{l.id}.{n}": grads[l.id][n] for l in net.layers for n in l.params()}


def sgd_epochs(model: Network, data: Dataset, config: AggregationConfig, rng: np.random.Generator,
               anchor: dict | None = None, correction: dict | None = None, momentum_buf: dict | None = None,
               round_index=None, client_id=None):
    """Mini-batch SGD with momentum for ``config.local_epochs`` epochs (in place).

    ``anchor`` adds the proximal term ``(prox_mu / 2) ||w - anchor||^2``;
    ``correction`` is added to every gradient (scaffold).  Batches of a
    single sample are skipped since train-mode BN is undefined on them.
    Returns ``(n_steps, mean minibatch loss, momentum buffer)``.
    """
    keys = model.learnable_keys()
    buf = momentum_buf if momentum_buf is not None else {k: 0.0 for k in keys}
    n = len(data)
    steps, total = 0, 0.0
    for _ in range(config.local_epochs):
        perm = rng.permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            value, grads = mlp_backward(model, data.inputs[idx], data.labels[idx], config.loss,
                                        bn_mode="train", update_stats=True)
            if not np.isfinite(value):
                raise FederatedError(
                    f"non-finite loss in round {round_index}, client {client_id}, batch {b} "
                    f"(lr={config.local_lr})", round_index, client_id)
            flat = _grad_dict(model, grads)
            state = None
            if anchor is not None and config.prox_mu > 0:
                state = model.state_dict()
            for key in keys:
                g = flat[key]
                if state is not None and key in anchor:
                    g = g + config.prox_mu * (state[key] - anchor[key])
                if correction is not None and key in correction:
                    g = g + correction[key]
                buf[key] = config.momentum * buf[key] + g
                flat[key] = buf[key]
            for layer in model.layers:
                for name in layer.params():
                    setattr(layer, name, getattr(layer, name) - config.local_lr * flat[f"{layer.id}.{name}"])
            steps += 1
            total += value
    return steps, (total / steps if steps else float("nan")), buf


def local_update(client: ClientState, global_state: dict, config: AggregationConfig,
                 rng: np.random.Generator, server_control: dict | None = None,
                 round_index=None) -> LocalResult:
    model = client.model
    model.load_state_dict(global_state, skip_bn=config.exclude_bn)
    start = model.state_dict()
    keys = shared_keys(model, config.exclude_bn)
    learn = set(model.learnable_keys())

    anchor = {k: start[k] for k in learn} if config.strategy == "fedprox" else None
    correction = None
    if config.strategy == "scaffold":
        if client.control is None:
            client.control = {k: np.zeros_like(start[k]) for k in learn}
        if server_control is None:
            server_control = {k: np.zeros_like(start[k]) for k in learn}
        correction = {k: server_control[k] - client.control[k] for k in keys if k in learn}

    buf = None if config.reset_momentum else client.momentum_buf
    steps, local_loss, buf = sgd_epochs(model, client.train, config, rng, anchor, correction, buf,
                                        round_index, client.client_id)
    client.momentum_buf = buf
    state = model.state_dict()

    delta = None
    if config.strategy == "scaffold" and steps > 0:
        new_control = {}
        delta = {}
        for k in learn:
            if k in correction:
                new_control[k] = (client.control[k] - server_control[k]
                                  + (start[k] - state[k]) / (steps * config.local_lr))
            else:
                new_control[k] = client.control[k]
            delta[k] = new_control[k] - client.control[k]
        client.control = new_control
    return LocalResult(client.client_id, state, steps, local_loss, delta, len(client.train))


def aggregate(server: ServerState, results: list, config: AggregationConfig,
              n_clients: int | None = None) -> dict:
    """New global state from client results given in client-id order.

    Running statistics (non-learnable) are always weight-averaged; learnable
    tensors follow the strategy.  BN entries are left untouched when
    ``exclude_bn`` is set.
    """
    if not results:
        raise FederatedError("no client results to aggregate", server.round)
    glob = server.model.state_dict()
    for r in results:
        if set(r.state) != set(glob):
            raise FederatedError(f"client {r.client_id} submitted a mismatched layer set", server.round, r.client_id)
    n_clients = n_clients or len(results)
    all_w = config.weights(n_clients)
    w = np.array([all_w[r.client_id] for r in results])
    w = w / w.sum()
    learn = set(server.model.learnable_keys())
    keys = shared_keys(server.model, config.exclude_bn)
    new = dict(glob)

    tau_eff = float(sum(wi * r.n_steps for wi, r in zip(w, results)))
    b1, b2 = config.betas
    for key in keys:
        mean = sum(wi * r.state[key] for wi, r in zip(w, results))
        if key not in learn or config.strategy in ("fedavg", "fedprox", "scaffold"):
            new[key] = mean
        elif config.strategy == "fednova":
            direction = sum(wi * (glob[key] - r.state[key]) / max(r.n_steps, 1) for wi, r in zip(w, results))
            new[key] = glob[key] - tau_eff * direction
        elif config.strategy == "fedadam":
            delta = mean - glob[key]
            m = b1 * server.adam_m.get(key, np.zeros_like(delta)) + (1 - b1) * delta
            v = b2 * server.adam_v.get(key, np.zeros_like(delta)) + (1 - b2) * delta * delta
            server.adam_m[key], server.adam_v[key] = m, v
            new[key] = glob[key] + config.server_lr * m / (np.sqrt(v) + config.adam_eps)

    if config.strategy == "scaffold":
        if server.control is None:
            server.control = {k: np.zeros_like(glob[k]) for k in learn}
        frac = len(results) / n_clients
        for key in learn:
            if all(r.control_delta is not None for r in results):
                server.control[key] = server.control[key] + frac * sum(
                    wi * r.control_delta[key] for wi, r in zip(w, results))
    if config.strategy == "fednova":
        server.steps.update({r.client_id: r.n_steps for r in results})

    server.model.load_state_dict(new)
    server.round += 1
    return new


def _round_rng(seed, t, cid):
    return np.random.default_rng([seed, t, cid])


def _bn_snapshot(net: Network):
    s = net.state_dict()
    return {k: s[k].copy() for k in net.bn_keys()}


def run_federated_training(client_data, template: Network, config: AggregationConfig, T: int,
                           seed: int, threads: int = 1, invariant_checks: bool = False,
                           on_round=None) -> FederatedRun:
    """``T`` rounds of broadcast -> parallel local update -> aggregate.

    ``client_data`` is a list of ``(train, val)`` dataset pairs (``val`` may be
    ``None``).  Results are reduced in client-id order, so the outcome does
    not depend on ``threads``.
    """
    if not client_data:
        raise ValueError("need at least one client")
    if T < 1:
        raise ValueError("T must be >= 1")
    n = len(client_data)
    server = ServerState(template.copy())
    clients = [ClientState(i, template.copy(), tr, va) for i, (tr, va) in enumerate(client_data)]
    weights = config.weights(n)
    classification = config.loss == "cross-entropy"
    metrics = []
    best = (-np.inf, 0, server.model.state_dict(), [c.model.state_dict() for c in clients])
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    try:
        for t in range(1, T + 1):
            tic = time.perf_counter()
            global_state = server.model.state_dict()
            if config.participation < 1.0:
                k = max(1, int(round(config.participation * n)))
                chosen = sorted(_round_rng(seed, t, SELECTION_STREAM).choice(n, size=k, replace=False).tolist())
            else:
                chosen = list(range(n))
            server_control = server.control

            if invariant_checks and config.exclude_bn:
                before = {i: _bn_snapshot(clients[i].model) for i in chosen}

            def work(i):
                try:
                    return local_update(clients[i], global_state, config, _round_rng(seed, t, i),
                                        server_control, t)
                except FederatedError:
                    raise
                except Exception as exc:
                    raise FederatedError(f"round {t}, client {i}: {exc}", t, i) from exc

            if invariant_checks and config.exclude_bn:
                # Broadcast alone must leave every client BN tensor untouched.
                for i in chosen:
                    probe = clients[i].model.copy()
                    probe.load_state_dict(global_state, skip_bn=True)
                    after = _bn_snapshot(probe)
                    for key, value in before[i].items():
                        if not np.array_equal(value, after[key]):
                            raise InvariantViolation(f"round {t}: broadcast overwrote client {i} {key}")

            results = list(pool.map(work, chosen)) if pool else [work(i) for i in chosen]
            new_global = aggregate(server, results, config, n)

            if invariant_checks and config.strategy == "fedavg":
                w = np.array([weights[r.client_id] for r in results])
                w = w / w.sum()
                for key in shared_keys(server.model, config.exclude_bn):
                    expected = np.zeros_like(new_global[key])
                    for wi, r in zip(w, results):
                        expected = expected + wi * r.state[key]
                    err = float(np.max(np.abs(expected - new_global[key]))) if expected.size else 0.0
                    if err > 1e-12:
                        raise InvariantViolation(f"round {t}: {key} differs from weighted mean by {err:.3e}")

            # Next broadcast, applied now so metrics describe the models clients hold.
            for c in clients:
                snap = _bn_snapshot(c.model) if invariant_checks and config.exclude_bn else None
                c.model.load_state_dict(new_global, skip_bn=config.exclude_bn)
                if snap is not None:
                    after = _bn_snapshot(c.model)
                    for key, value in snap.items():
                        if not np.array_equal(value, after[key]):
                            raise InvariantViolation(f"round {t}: broadcast overwrote client {c.client_id} {key}")

            local = {r.client_id: r.local_loss for r in results}
            tr_loss, va_loss, va_acc = {}, {}, {}
            for c in clients:
                tr_loss[c.client_id] = evaluate(c.model, c.train, config.loss)[0]
                if c.val is not None:
                    va_loss[c.client_id], va_acc[c.client_id] = evaluate(c.model, c.val, config.loss)
            for value in list(tr_loss.values()) + list(va_loss.values()):
                if not np.isfinite(value):
                    raise FederatedError(f"round {t}: non-finite evaluation loss", t)
            rm = RoundMetrics(t, tr_loss, va_loss, va_acc, local,
                              float(np.mean(list(tr_loss.values()))), time.perf_counter() - tic)
            metrics.append(rm)
            if on_round is not None:
                on_round(rm, server, clients)

            if va_loss:
                score = float(np.mean(list(va_acc.values()))) if classification else -float(np.mean(list(va_loss.values())))
            else:
                score = -rm.mean_train_loss
            if score > best[0]:
                best = (score, t, server.model.state_dict(), [c.model.state_dict() for c in clients])
    finally:
        if pool:
            pool.shutdown()

    return FederatedRun(server, clients, config, metrics, best[1], best[2], best[3])


def centralized_training(data: Dataset, template: Network, config: AggregationConfig, T: int, seed: int) -> Network:
    """Plain SGD on one dataset with the same per-epoch seeding as a one-client run."""
    model = template.copy()
    buf = None
    for t in range(1, T + 1):
        _, _, buf = sgd_epochs(model, data, config, _round_rng(seed, t, 0),
                               momentum_buf=None if config.reset_momentum else buf)
    return model
