"""Federated testing on internal and external clients.

Internal clients are evaluated with their personalized model.  External
clients are evaluated with the global model while every BN layer streams
the test batches into its running statistics (momentum ``tau``), each batch
being normalized by the statistics that already include it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import Dataset
from .nn import Network, accuracy, loss_and_grad


@dataclass
class ReestimationConfig:
    momentum: float = 0.9
    batch_size: int = 32
    order_seed: int | None = None      # None keeps the given batch order
    reset_stats: bool = True           # start from mean 0 / var 1 instead of the global stats
    var_center: str = "running"        # "batch" uses the batch mean in the variance term

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.var_center not in ("running", "batch"):
            raise ValueError(f"unknown var_center {self.var_center!r}")


@dataclass
class EvalReport:
    client_id: int
    n_samples: int
    loss: float
    accuracy: float | None
    mode: str
    bn_stats: dict = field(default_factory=dict)
    feature_moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("report needs at least one sample")

    def first_layer_moments(self):
        """``(||mean||_2, mean per-feature variance)`` at the first BN layer."""
        if not self.feature_moments:
            raise ValueError("report has no feature moments")
        first = next(iter(self.feature_moments.values()))
        return float(np.linalg.norm(first["mean"])), float(np.mean(first["var"]))

    def to_dict(self):
        def conv(obj):
            if isinstance(obj, np.ndarray):
                return obj.tolist()
            if isinstance(obj, dict):
                return {k: conv(v) for k, v in obj.items()}
            return obj
        return conv(asdict(self))

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _loss_name(loss):
    return loss or "cross-entropy"


def make_batches(data: Dataset, batch_size: int, order_seed: int | None = None) -> list[Dataset]:
    """Consecutive chunks of ``batch_size``; ``order_seed`` permutes the chunk order."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    chunks = [data.subset(np.arange(s, min(s + batch_size, len(data)))) for s in range(0, len(data), batch_size)]
    if order_seed is not None:
        perm = np.random.default_rng([order_seed, 2718]).permutation(len(chunks))
        chunks = [chunks[i] for i in perm]
    return chunks


def _summarize(out, labels, loss):
    value = loss_and_grad(out, labels, loss)[0]
    acc = accuracy(out, labels) if loss == "cross-entropy" else None
    return value, acc


def _moments(feats: dict) -> dict:
    return {lid: {"mean": np.concatenate(v).mean(axis=0), "var": np.concatenate(v).var(axis=0)}
            for lid, v in feats.items()}


def _stats(net: Network) -> dict:
    return {l.id: {"mean": l.running_mean.copy(), "var": l.running_var.copy()} for l in net.bn_layers}


def test_internal(model: Network, data: Dataset, loss: str = "cross-entropy") -> EvalReport:
    out, cache = model.forward(data.inputs, "eval", update_stats=False, capture=True)
    value, acc = _summarize(out, data.labels, _loss_name(loss))
    moments = _moments({k: [v] for k, v in cache["normalized"].items()})
    return EvalReport(data.client_id, len(data), value, acc, "internal", _stats(model), moments)


def test_external_frozen(global_model: Network, batches, loss: str = "cross-entropy") -> EvalReport:
    batches = list(batches)
    if not batches:
        raise ValueError("need at least one batch")
    X = np.concatenate([b.inputs for b in batches])
    y = np.concatenate([b.labels for b in batches])
    out, cache = global_model.forward(X, "eval", update_stats=False, capture=True)
    value, acc = _summarize(out, y, _loss_name(loss))
    moments = _moments({k: [v] for k, v in cache["normalized"].items()})
    return EvalReport(batches[0].client_id, len(y), value, acc, "frozen", _stats(global_model), moments)


def reestimated_model(global_model: Network, cfg: ReestimationConfig) -> Network:
    model = global_model.copy()
    for layer in model.bn_layers:
        layer.momentum = cfg.momentum
        layer.var_center = cfg.var_center
        if cfg.reset_stats:
            layer.reset_stats()
    return model


def test_external(global_model: Network, batches, cfg: ReestimationConfig | None = None,
                  loss: str = "cross-entropy", return_model: bool = False):
    """Stream ``batches`` through a copy of ``global_model`` in re-estimation mode.

    Learnable parameters are never touched.  Feature moments in the report
    pool the normalized activations of all batches as they were produced.
    """
    cfg = cfg or ReestimationConfig()
    batches = list(batches)
    if not batches:
        raise ValueError("need at least one batch")
    model = reestimated_model(global_model, cfg)
    outs, labels, feats = [], [], {}
    for b in batches:
        if len(b) == 0:
            raise ValueError("empty batch")
        out, cache = model.forward(b.inputs, "reestimate", capture=True)
        outs.append(out)
        labels.append(b.labels)
        for lid, z in cache["normalized"].items():
            feats.setdefault(lid, []).append(z)
    out = np.concatenate(outs)
    y = np.concatenate(labels)
    value, acc = _summarize(out, y, _loss_name(loss))
    report = EvalReport(batches[0].client_id, len(y), value, acc, "reestimated", _stats(model), _moments(feats))
    return (report, model) if return_model else report


def _rows(param, value, report, seed):
    return {"param": param, "value": value, "accuracy": report.accuracy, "loss": report.loss, "seed": seed}


def ablate_batch_size(model: Network, data: Dataset, sizes, seed: int = 0, loss: str = "cross-entropy",
                      reset_stats: bool = True):
    """One-batch re-estimation (no momentum) at each chunk size, plus the frozen row."""
    rows = []
    for size in sizes:
        batches = make_batches(data, int(size))
        cfg = ReestimationConfig(momentum=0.0, batch_size=int(size), reset_stats=reset_stats)
        rows.append(_rows("batch_size", int(size), test_external(model, batches, cfg, loss), seed))
        rows.append(_rows("batch_size_frozen", int(size), test_external_frozen(model, batches, loss), seed))
    return rows


def ablate_momentum(model: Network, data: Dataset, taus, batch_size: int = 32, seed: int = 0,
                    loss: str = "cross-entropy", reset_stats: bool = True):
    rows = []
    batches = make_batches(data, batch_size)
    for tau in taus:
        cfg = ReestimationConfig(momentum=float(tau), batch_size=batch_size, reset_stats=reset_stats)
        rows.append(_rows("momentum", float(tau), test_external(model, batches, cfg, loss), seed))
    return rows


def ablate_order(model: Network, data: Dataset, n_orders: int = 10, seed: int = 0, momentum: float = 0.9,
                 batch_size: int = 32, loss: str = "cross-entropy", reset_stats: bool = True):
    """Re-estimation accuracy under ``n_orders`` random batch orders."""
    rows = []
    for k in range(n_orders):
        order_seed = int(np.random.default_rng([seed, k]).integers(2**31))
        batches = make_batches(data, batch_size, order_seed)
        cfg = ReestimationConfig(momentum=momentum, batch_size=batch_size, order_seed=order_seed,
                                 reset_stats=reset_stats)
        rows.append(_rows("order", k, test_external(model, batches, cfg, loss), seed))
    return rows


def spread(rows, key="accuracy") -> float:
    values = [r[key] for r in rows]
    return float(max(values) - min(values))


ABLATION_COLUMNS = ("param", "value", "accuracy", "loss", "seed")


def ablation_csv(rows) -> str:
    lines = [",".join(ABLATION_COLUMNS)]
    for r in rows:
        cells = []
        for col in ABLATION_COLUMNS:
            v = r[col]
            cells.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# keep pytest from collecting the evaluation entry points
for _fn in (test_internal, test_external_frozen, test_external):
    _fn.__test__ = False
