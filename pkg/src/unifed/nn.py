"""Small numpy neural-network core.

Two model families live here:

* ``Network`` -- an MLP built from ``Dense``, ``BNLayer`` and ``ReLU`` layers
  with hand-written backward passes, used by the federated simulator.
* ``TwoLayerBNModel`` -- the two-layer ReLU network whose first layer is
  normalized per client, ``f(x) = m^-1/2 sum_k c_k relu(gamma_k v_k.x / ||v_k||_S)``,
  used for the tangent-kernel analysis.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1
BN_MODES = ("train", "eval", "reestimate", "probe")
LOSSES = ("squared", "cross-entropy")


class ShapeError(ValueError):
    pass


class DegenerateNeuronError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Layers


@dataclass
class Dense:
    id: str
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    kind = "dense"

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]

    def params(self):
        return {"W": self.W, "b": self.b}


@dataclass
class ReLU:
    id: str
    kind = "relu"

    def params(self):
        return {}


@dataclass
class BNLayer:
    """Batch normalization with learnable scale/shift and running statistics.

    ``var_center`` selects the centering used in the running-variance update:
    ``"running"`` subtracts the freshly updated running mean, ``"batch"`` the
    batch mean.  They coincide when ``momentum == 0``.
    """

    id: str
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    mode: str = "train"
    var_center: str = "running"
    kind = "bn"

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"BN momentum must be in [0, 1), got {self.momentum}")
        if not self.eps > 0:
            raise ValueError("BN eps must be > 0")
        if self.mode not in BN_MODES:
            raise ValueError(f"unknown BN mode {self.mode!r}")
        if self.var_center not in ("running", "batch"):
            raise ValueError(f"unknown var_center {self.var_center!r}")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def fresh(cls, id: str, dim: int, **kw) -> "BNLayer":
        return cls(id, np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim), **kw)

    @property
    def dim(self):
        return self.gamma.shape[0]

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def reset_stats(self):
        self.running_mean = np.zeros(self.dim)
        self.running_var = np.ones(self.dim)

    def update_stats(self, batch: np.ndarray):
        """Fold one batch into the running statistics (momentum update)."""
        tau = self.momentum
        mu = tau * self.running_mean + (1.0 - tau) * batch.mean(axis=0)
        center = mu if self.var_center == "running" else batch.mean(axis=0)
        var = tau * self.running_var + (1.0 - tau) * ((batch - center) ** 2).mean(axis=0)
        self.running_mean = mu
        self.running_var = var


def _bn_forward(layer: BNLayer, batch: np.ndarray, mode: str, update_stats: bool):
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ShapeError(f"BN layer {layer.id}: empty or malformed batch {batch.shape}")
    if batch.shape[1] != layer.dim:
        raise ShapeError(f"BN layer {layer.id}: expected {layer.dim} features, got {batch.shape[1]}")
    batch_stats = False
    if mode in ("train", "probe"):
        mean = batch.mean(axis=0)
        var = ((batch - mean) ** 2).mean(axis=0)
        batch_stats = True
        if mode == "train" and update_stats:
            layer.update_stats(batch)
    elif mode == "reestimate":
        layer.update_stats(batch)
        mean, var = layer.running_mean, layer.running_var
    else:
        mean, var = layer.running_mean, layer.running_var
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = (batch - mean) * inv_std
    out = layer.gamma * xhat + layer.beta
    return out, (xhat, inv_std, batch_stats)


def bn_forward(layer: BNLayer, batch, mode: str | None = None, update_stats: bool = True) -> np.ndarray:
    """Apply one BN layer.

    ``train`` normalizes by batch statistics and updates the running stats;
    ``eval`` normalizes by the stored running stats; ``reestimate`` first
    folds the batch into the running stats and then normalizes by them, so
    the batch takes part in its own normalization; ``probe`` is ``train``
    without any state update.
    """
    mode = mode or layer.mode
    if mode not in BN_MODES:
        raise ValueError(f"unknown BN mode {mode!r}")
    return _bn_forward(layer, np.asarray(batch, dtype=float), mode, update_stats)[0]


# ---------------------------------------------------------------------------
# Network


class Network:
    def __init__(self, layers):
        self.layers = list(layers)
        ids = [l.id for l in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate layer ids in {ids}")
        self._check_dims()

    def _check_dims(self):
        dim = None
        for layer in self.layers:
            if isinstance(layer, Dense):
                if dim is not None and layer.in_dim != dim:
                    raise ShapeError(f"layer {layer.id}: expects {layer.in_dim} inputs, previous layer gives {dim}")
                dim = layer.out_dim
            elif isinstance(layer, BNLayer):
                if dim is not None and layer.dim != dim:
                    raise ShapeError(f"layer {layer.id}: BN over {layer.dim} features, previous layer gives {dim}")
                dim = layer.dim

    @property
    def input_dim(self):
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.in_dim
            if isinstance(layer, BNLayer):
                return layer.dim
        return None

    def layer(self, layer_id):
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    @property
    def bn_layers(self) -> list[BNLayer]:
        return [l for l in self.layers if isinstance(l, BNLayer)]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def state_dict(self) -> dict[str, np.ndarray]:
        """All parameters and BN buffers keyed ``"<layer id>.<name>"`` (copies)."""
        state = {}
        for layer in self.layers:
            for name, value in layer.params().items():
                state[f"{layer.id}.{name}"] = value.copy()
            if isinstance(layer, BNLayer):
                for name, value in layer.buffers().items():
                    state[f"{layer.id}.{name}"] = value.copy()
        return state

    def learnable_keys(self) -> list[str]:
        return [f"{l.id}.{n}" for l in self.layers for n in l.params()]

    def bn_keys(self) -> set[str]:
        keys = set()
        for layer in self.bn_layers:
            keys.update(f"{layer.id}.{n}" for n in list(layer.params()) + list(layer.buffers()))
        return keys

    def load_state_dict(self, state, skip_bn: bool = False):
        for layer in self.layers:
            if skip_bn and isinstance(layer, BNLayer):
                continue
            names = list(layer.params())
            if isinstance(layer, BNLayer):
                names += list(layer.buffers())
            for name in names:
                key = f"{layer.id}.{name}"
                if key not in state:
                    raise KeyError(f"state is missing {key}")
                value = np.array(state[key], dtype=float)
                if value.shape != getattr(layer, name).shape:
                    raise ShapeError(f"{key}: shape {value.shape} != {getattr(layer, name).shape}")
                setattr(layer, name, value)

    def apply_update(self, grads, lr):
        for layer in self.layers:
            for name in layer.params():
                setattr(layer, name, getattr(layer, name) - lr * grads[layer.id][name])

    def set_bn_mode(self, mode):
        for layer in self.bn_layers:
            layer.mode = mode

    def forward(self, X, bn_mode: str = "eval", update_stats: bool = True, capture: bool = False):
        """Returns ``(output, cache)``.

        With ``capture`` the cache also maps each BN layer id to its
        normalized (pre scale-shift) activations under ``"normalized"``.
        """
        if bn_mode not in BN_MODES:
            raise ValueError(f"unknown BN mode {bn_mode!r}")
        h = np.asarray(X, dtype=float)
        if h.ndim == 1:
            h = h[None, :]
        cache = {"layers": [], "normalized": {}, "bn_mode": bn_mode}
        for layer in self.layers:
            if isinstance(layer, Dense):
                if h.shape[1] != layer.in_dim:
                    raise ShapeError(f"layer {layer.id}: expected {layer.in_dim} inputs, got {h.shape[1]}")
                cache["layers"].append(h)
                h = h @ layer.W.T + layer.b
            elif isinstance(layer, BNLayer):
                h, bn_cache = _bn_forward(layer, h, bn_mode, update_stats)
                cache["layers"].append(bn_cache)
                if capture:
                    cache["normalized"][layer.id] = bn_cache[0]
            else:
                cache["layers"].append(h > 0)
                h = np.maximum(h, 0.0)
        return h, cache

    def backward(self, cache, dout):
        """Gradients of a scalar loss given ``dout = dL/d(output)``."""
        grads = {}
        g = dout
        for layer, saved in zip(reversed(self.layers), reversed(cache["layers"])):
            if isinstance(layer, Dense):
                grads[layer.id] = {"W": g.T @ saved, "b": g.sum(axis=0)}
                g = g @ layer.W
            elif isinstance(layer, BNLayer):
                xhat, inv_std, batch_stats = saved
                grads[layer.id] = {"gamma": (g * xhat).sum(axis=0), "beta": g.sum(axis=0)}
                gx = g * layer.gamma
                if batch_stats:
                    n = g.shape[0]
                    g = inv_std / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
                elif cache["bn_mode"] == "eval":
                    g = gx * inv_std
                else:
                    raise NotImplementedError("no backward pass through BN in reestimate mode")
            else:
                grads[layer.id] = {}
                g = g * saved
        return grads


def build_mlp(input_dim: int, hidden=(32, 32), output_dim: int = 2, bn: bool = True,
              seed: int = 0, bn_momentum: float = 0.9, eps: float = 1e-5,
              var_center: str = "running") -> Network:
    """Dense -> BN -> ReLU blocks followed by a Dense head (He init)."""
    rng = np.random.default_rng([seed, 4099])
    layers = []
    prev = input_dim
    for j, width in enumerate(hidden, start=1):
        W = rng.standard_normal((width, prev)) * np.sqrt(2.0 / prev)
        layers.append(Dense(f"fc{j}", W, np.zeros(width)))
        if bn:
            layers.append(BNLayer.fresh(f"bn{j}", width, momentum=bn_momentum, eps=eps, var_center=var_center))
        layers.append(ReLU(f"relu{j}"))
        prev = width
    W = rng.standard_normal((output_dim, prev)) * np.sqrt(1.0 / prev)
    layers.append(Dense("head", W, np.zeros(output_dim)))
    return Network(layers)


# ---------------------------------------------------------------------------
# Losses


def class_targets(labels) -> np.ndarray:
    """Class indices from labels given as ``+-1`` or as ``0..K-1``."""
    labels = np.asarray(labels)
    if np.all(np.isin(labels, (-1.0, 1.0))):
        return (labels > 0).astype(int)
    return labels.astype(int)


def loss_and_grad(out: np.ndarray, labels, loss: str):
    """Mean loss over the batch and its gradient w.r.t. ``out``.

    ``squared`` is ``0.5 * mean ||out - y||^2``; ``cross-entropy`` is the mean
    softmax negative log-likelihood.
    """
    n = out.shape[0]
    if loss == "squared":
        y = np.asarray(labels, dtype=float).reshape(n, -1)
        if y.shape[1] != out.shape[1]:
            raise ShapeError(f"labels {y.shape} do not match outputs {out.shape}")
        r = out - y
        return 0.5 * float(np.sum(r * r)) / n, r / n
    if loss == "cross-entropy":
        t = class_targets(labels)
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        value = -float(logp[np.arange(n), t].sum()) / n
        d = np.exp(logp)
        d[np.arange(n), t] -= 1.0
        return value, d / n
    raise ValueError(f"unknown loss {loss!r}")


def accuracy(out: np.ndarray, labels) -> float:
    return float(np.mean(out.argmax(axis=1) == class_targets(labels)))


def mlp_forward(net: Network, batch, bn_mode: str = "eval", update_stats: bool = True) -> np.ndarray:
    return net.forward(batch, bn_mode, update_stats)[0]


def mlp_backward(net: Network, batch, labels, loss: str = "squared", bn_mode: str = "train",
                 update_stats: bool = False):
    """``(loss value, gradients keyed by layer id)``; running stats get no gradient."""
    out, cache = net.forward(batch, bn_mode, update_stats)
    value, dout = loss_and_grad(out, labels, loss)
    return value, net.backward(cache, dout)


# ---------------------------------------------------------------------------
# Checkpoints


def _encode(a: np.ndarray):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "values": [format(float(v), ".17g") for v in a.ravel()]}


def _decode(obj) -> np.ndarray:
    return np.array([float(v) for v in obj["values"]], dtype=float).reshape(obj["shape"])


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        entry = {"id": layer.id, "kind": layer.kind}
        if isinstance(layer, Dense):
            entry["shape"] = list(layer.W.shape)
            entry["params"] = {k: _encode(v) for k, v in layer.params().items()}
        elif isinstance(layer, BNLayer):
            entry["shape"] = [layer.dim]
            entry["params"] = {k: _encode(v) for k, v in layer.params().items()}
            entry["buffers"] = {k: _encode(v) for k, v in layer.buffers().items()}
            entry["momentum"] = format(layer.momentum, ".17g")
            entry["eps"] = format(layer.eps, ".17g")
            entry["var_center"] = layer.var_center
        layers.append(entry)
    return {"format_version": CHECKPOINT_FORMAT_VERSION, "layers": layers}


def network_from_dict(doc: dict) -> Network:
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    layers = []
    for entry in doc["layers"]:
        kind = entry["kind"]
        if kind == "dense":
            p = entry["params"]
            layers.append(Dense(entry["id"], _decode(p["W"]), _decode(p["b"])))
        elif kind == "bn":
            p, b = entry["params"], entry["buffers"]
            layers.append(BNLayer(
                entry["id"], _decode(p["gamma"]), _decode(p["beta"]),
                _decode(b["running_mean"]), _decode(b["running_var"]),
                momentum=float(entry["momentum"]), eps=float(entry["eps"]),
                var_center=entry.get("var_center", "running"),
            ))
        elif kind == "relu":
            layers.append(ReLU(entry["id"]))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Network(layers)


def save_checkpoint(net: Network, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=1)


def load_checkpoint(path) -> Network:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Two-layer BN-ReLU model


@dataclass
class TwoLayerBNModel:
    """``gamma`` is ``(m,)`` for the shared (aggregated) variant, ``(m, N)`` for
    the client-specific one."""

    V: np.ndarray
    gamma: np.ndarray
    c: np.ndarray
    alpha: float
    client_covariances: list = field(default_factory=list)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.V.shape[0] < 1:
            raise ValueError("width m must be >= 1")
        if not np.all(np.isin(self.c, (-1.0, 1.0))):
            raise ValueError("output weights c must be exactly +-1")
        if self.gamma.shape[0] != self.V.shape[0] or self.gamma.ndim not in (1, 2):
            raise ShapeError(f"gamma shape {self.gamma.shape} does not match width {self.V.shape[0]}")
        if self.gamma.ndim == 2 and self.gamma.shape[1] != len(self.client_covariances):
            raise ShapeError("client-specific gamma needs one column per client")

    @property
    def m(self):
        return self.V.shape[0]

    @property
    def d(self):
        return self.V.shape[1]

    @property
    def n_clients(self):
        return len(self.client_covariances)

    @property
    def shared(self) -> bool:
        return self.gamma.ndim == 1

    def gamma_for(self, client: int) -> np.ndarray:
        return self.gamma if self.shared else self.gamma[:, client]

    def gamma_matrix(self) -> np.ndarray:
        """``(m, N)`` view with the shared vector repeated per client."""
        if self.shared:
            return np.repeat(self.gamma[:, None], self.n_clients, axis=1)
        return self.gamma

    def as_shared(self) -> "TwoLayerBNModel":
        if self.shared:
            return self.copy()
        if not np.all(self.gamma == self.gamma[:, :1]):
            raise ValueError("client gammas differ; no shared equivalent")
        return TwoLayerBNModel(self.V.copy(), self.gamma[:, 0].copy(), self.c.copy(), self.alpha,
                               list(self.client_covariances))

    def as_client_specific(self) -> "TwoLayerBNModel":
        return TwoLayerBNModel(self.V.copy(), self.gamma_matrix().copy(), self.c.copy(), self.alpha,
                               list(self.client_covariances))

    def copy(self) -> "TwoLayerBNModel":
        return copy.deepcopy(self)

    def neuron_norms(self) -> np.ndarray:
        """``||v_k||_{S_i}`` as an ``(m, N)`` array."""
        out = np.empty((self.m, self.n_clients))
        for i, S in enumerate(self.client_covariances):
            out[:, i] = np.sqrt(np.maximum(np.einsum("kd,de,ke->k", self.V, S, self.V), 0.0))
        if np.any(out < 1e-12):
            k, i = np.argwhere(out < 1e-12)[0]
            raise DegenerateNeuronError(f"neuron {k} has ||v||_S = {out[k, i]:.3e} for client {i}")
        return out


def two_layer_init(m: int, d: int, N: int, alpha: float, seed: int, covariances=None,
                   shared: bool = False) -> TwoLayerBNModel:
    """``v_k ~ N(0, alpha^2 I)``, ``c_k ~ U{-1, 1}``, ``gamma = ||v_k(0)||_2 / alpha``."""
    if min(m, d, N) < 1:
        raise ValueError("m, d and N must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    rng = np.random.default_rng([seed, 65537])
    V = alpha * rng.standard_normal((m, d))
    c = rng.choice([-1.0, 1.0], size=m)
    g = np.linalg.norm(V, axis=1) / alpha
    gamma = g.copy() if shared else np.repeat(g[:, None], N, axis=1)
    covs = list(covariances) if covariances is not None else [np.eye(d) for _ in range(N)]
    if len(covs) != N:
        raise ValueError(f"expected {N} covariances, got {len(covs)}")
    return TwoLayerBNModel(V, gamma, c, float(alpha), covs)


def _two_layer_terms(model: TwoLayerBNModel, X: np.ndarray, client_ids: np.ndarray):
    norms = model.neuron_norms()                   # (m, N)
    Z = X @ model.V.T                              # (P, m) raw pre-activations v_k.x
    inv = 1.0 / norms[:, client_ids].T             # (P, m) 1/||v_k||_{S_ip}
    G = model.gamma_matrix()[:, client_ids].T      # (P, m) gamma_{k, ip}
    S = G * Z * inv                                # normalized, scaled pre-activation
    return Z, inv, G, S


def two_layer_predict(model: TwoLayerBNModel, X, client_ids) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    client_ids = np.asarray(client_ids, dtype=int).reshape(-1)
    if client_ids.size == 1 and X.shape[0] > 1:
        client_ids = np.full(X.shape[0], int(client_ids[0]))
    if np.any(client_ids < 0) or np.any(client_ids >= model.n_clients):
        raise ValueError("client index out of range")
    _, _, _, S = _two_layer_terms(model, X, client_ids)
    return np.maximum(S, 0.0) @ model.c / np.sqrt(model.m)


def two_layer_forward(model: TwoLayerBNModel, x, client: int) -> float:
    return float(two_layer_predict(model, np.asarray(x, dtype=float)[None, :], [client])[0])


def s_projection(x, u, S) -> np.ndarray:
    """``(I - S u u^T / ||u||_S^2) x``, applied row-wise if ``x`` is 2-D."""
    u = np.asarray(u, dtype=float)
    Su = S @ u
    return x - np.multiply.outer(np.asarray(x) @ u, Su) / float(u @ Su)


def projected_inputs(model: TwoLayerBNModel, X: np.ndarray, client_ids: np.ndarray) -> np.ndarray:
    """``x_p^{v_k perp}`` for every point and neuron as a ``(P, m, d)`` array."""
    Z = X @ model.V.T                                       # (P, m)
    out = np.empty((X.shape[0], model.m, model.d))
    for i in np.unique(client_ids):
        rows = client_ids == i
        SV = model.V @ model.client_covariances[i]          # (m, d): rows S v_k (S symmetric)
        vsv = np.sum(SV * model.V, axis=1)                  # ||v_k||_S^2
        out[rows] = X[rows][:, None, :] - (Z[rows] / vsv)[:, :, None] * SV[None, :, :]
    return out


def two_layer_loss(model: TwoLayerBNModel, X, client_ids, y) -> float:
    """``0.5 * ||f - y||^2`` summed over points."""
    r = two_layer_predict(model, X, client_ids) - np.asarray(y, dtype=float)
    return 0.5 * float(r @ r)


def two_layer_gradients(model: TwoLayerBNModel, X, client_ids, y):
    """Exact gradients of ``0.5 * ||f - y||^2`` w.r.t. ``V`` and ``gamma``.

    ``df_p/dv_k = m^-1/2 c_k gamma_k / ||v_k||_S * x_p^{v perp} * 1{v_k.x_p >= 0}`` and
    ``df_p/dgamma_k = m^-1/2 c_k / ||v_k||_S * relu(v_k.x_p)`` (for positive gamma;
    the indicator is taken on the scaled pre-activation so negative gamma
    is handled too).  Returns a dict with ``V``, ``gamma`` and ``loss``.
    """
    X = np.asarray(X, dtype=float)
    client_ids = np.asarray(client_ids, dtype=int)
    y = np.asarray(y, dtype=float)
    Z, inv, G, S = _two_layer_terms(model, X, client_ids)
    f = np.maximum(S, 0.0) @ model.c / np.sqrt(model.m)
    r = f - y
    act = (S >= 0.0).astype(float)
    coef = r[:, None] * model.c[None, :] / np.sqrt(model.m) * act * inv       # (P, m)
    dgamma_pts = coef * Z                                                     # (P, m)
    Xperp = projected_inputs(model, X, client_ids)                            # (P, m, d)
    dV = np.einsum("pk,pkd->kd", coef * G, Xperp)
    if model.shared:
        dgamma = dgamma_pts.sum(axis=0)
    else:
        dgamma = np.zeros_like(model.gamma)
        for i in range(model.n_clients):
            dgamma[:, i] = dgamma_pts[client_ids == i].sum(axis=0)
    return {"V": dV, "gamma": dgamma, "loss": 0.5 * float(r @ r), "f": f}
