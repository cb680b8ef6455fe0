"""Gram matrices of the two-layer BN-ReLU model.

Two families live here.  The infinite-width auxiliary Grams ``G_inf`` (all
pairs) and ``G*_inf`` (same-client pairs only), defined as
``E_{v ~ N(0, alpha^2 I)} relu(v.x_p) relu(v.x_q)``; and the finite-width
``V(t)``, ``G(t)`` of a concrete model, whose scaled sum
``Lambda = V / alpha^2 + G`` drives gradient-flow training under squared loss.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datagen import (ClientDistributionSpec, collinear_pairs, make_feature_shift_suite, make_teacher,
                      sample_inputs)
from .linalg import check_symmetric, smallest_eigenvalue, symmetric_eigh
from .nn import TwoLayerBNModel, projected_inputs, two_layer_gradients, two_layer_predict

VARIANTS = ("aggregated", "client_specific")
ESTIMATORS = ("closed-form", "monte-carlo")
MC_CHUNK = 100_000


def _check_points(X, client_ids):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"points must be a (P, d) array, got {X.shape}")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm point at index {int(np.flatnonzero(norms == 0.0)[0])}")
    cids = np.asarray(client_ids, dtype=int).reshape(-1)
    if cids.shape != (X.shape[0],):
        raise ValueError("need one client id per point")
    return X, cids, norms


def same_client_mask(client_ids) -> np.ndarray:
    cids = np.asarray(client_ids)
    return (cids[:, None] == cids[None, :]).astype(float)


def arccos_kernel(X, Y=None, alpha: float = 1.0) -> np.ndarray:
    """``E relu(v.x) relu(v.y)`` for ``v ~ N(0, alpha^2 I)``, in closed form."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
    nx = np.linalg.norm(X, axis=1)
    ny = np.linalg.norm(Y, axis=1)
    if np.any(nx == 0.0) or np.any(ny == 0.0):
        raise ValueError("zero-norm point")
    cos = np.clip((X @ Y.T) / np.outer(nx, ny), -1.0, 1.0)
    theta = np.arccos(cos)
    return alpha**2 * np.outer(nx, ny) / (2 * np.pi) * (np.sin(theta) + (np.pi - theta) * cos)


def _mc_shards(samples: int, chunk: int):
    sizes = [chunk] * (samples // chunk)
    if samples % chunk:
        sizes.append(samples % chunk)
    return sizes


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def mc_gram(X, alpha: float = 1.0, samples: int = 10**6, seed: int = 0, chunk: int = MC_CHUNK,
            threads: int = 1):
    """Monte-Carlo estimate of the Gram matrix and its per-entry standard error.

    Shard ``s`` draws from ``default_rng([seed, s])`` and the shards are
    reduced in index order, so results do not depend on ``threads``.
    """
    X = np.asarray(X, dtype=float)
    d = X.shape[1]

    def shard(job):
        s, n = job
        V = alpha * np.random.default_rng([seed, s]).standard_normal((n, d))
        F = np.maximum(V @ X.T, 0.0)
        F2 = F * F
        return F.T @ F, F2.T @ F2

    parts = _map(shard, list(enumerate(_mc_shards(samples, chunk))), threads)
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s1 / samples
    var = np.maximum(s2 / samples - mean**2, 0.0)
    return mean, np.sqrt(var / samples)


def mc_pair_expectations(A, B, alpha: float = 1.0, samples: int = 10**6, seed: int = 0,
                         chunk: int = MC_CHUNK, threads: int = 1):
    """Monte-Carlo ``E relu(v.a_j) relu(v.b_j)`` for each row pair ``(a_j, b_j)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape != B.shape:
        raise ValueError("pair arrays must have the same shape")
    d = A.shape[1]

    def shard(job):
        s, n = job
        V = alpha * np.random.default_rng([seed, s]).standard_normal((n, d))
        prod = np.maximum(V @ A.T, 0.0) * np.maximum(V @ B.T, 0.0)
        return prod.sum(axis=0), (prod * prod).sum(axis=0)

    parts = _map(shard, list(enumerate(_mc_shards(samples, chunk))), threads)
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    mean = s1 / samples
    var = np.maximum(s2 / samples - mean**2, 0.0)
    return mean, np.sqrt(var / samples)


@dataclass
class GramReport:
    G_inf: np.ndarray
    G_star_inf: np.ndarray
    e0: float
    e0_star: float
    estimator: str
    alpha: float
    client_ids: np.ndarray
    samples: int | None = None
    stderr: np.ndarray | None = None

    def __post_init__(self):
        for name in ("G_inf", "G_star_inf"):
            check_symmetric(getattr(self, name))

    def matrix(self, variant: str) -> np.ndarray:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        return self.G_inf if variant == "aggregated" else self.G_star_inf

    def numerical_error(self) -> float:
        """Bound on eigenvalue perturbation from estimation error (Weyl)."""
        if self.stderr is None:
            return 1e-12 * max(1.0, float(np.linalg.norm(self.G_inf)))
        return float(np.linalg.norm(self.stderr))

    def to_dict(self):
        return {
            "estimator": self.estimator,
            "alpha": self.alpha,
            "samples": self.samples,
            "e0": self.e0,
            "e0_star": self.e0_star,
            "client_ids": self.client_ids.tolist(),
            "G_inf": self.G_inf.tolist(),
            "G_star_inf": self.G_star_inf.tolist(),
            "stderr": None if self.stderr is None else self.stderr.tolist(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def gram_infinity(X, client_ids, alpha: float = 1.0, estimator: str = "closed-form",
                  samples: int = 10**6, seed: int = 0, check_collinear: bool = True,
                  threads: int = 1) -> GramReport:
    """Both auxiliary Grams for points ``X`` owned by ``client_ids``."""
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    X, cids, _ = _check_points(X, client_ids)
    if check_collinear:
        bad = collinear_pairs(X)
        if bad:
            raise ValueError(f"points {sorted(bad)[:5]} are collinear with earlier points")
    stderr = None
    if estimator == "closed-form":
        G = arccos_kernel(X, alpha=alpha)
        n_samples = None
    else:
        G, stderr = mc_gram(X, alpha, samples, seed, threads=threads)
        n_samples = samples
    G = 0.5 * (G + G.T)
    G_star = G * same_client_mask(cids)
    return GramReport(G, G_star, smallest_eigenvalue(G), smallest_eigenvalue(G_star), estimator,
                      float(alpha), cids, n_samples, stderr)


@dataclass
class OrderingVerdict:
    e0: float
    e0_star: float
    block_min: float
    block_eigs: dict
    tolerance: float
    ordering_holds: bool
    block_identity_error: float
    block_identity_holds: bool

    @property
    def passed(self) -> bool:
        return self.ordering_holds and self.block_identity_holds


def compare_min_eigenvalues(report: GramReport, tol: float | None = None,
                            block_tol: float = 1e-9) -> OrderingVerdict:
    """Check ``e0* >= e0`` and that ``e0*`` is the smallest per-client block eigenvalue."""
    tol = 3.0 * report.numerical_error() if tol is None else tol
    cids = report.client_ids
    block_eigs = {}
    for i in np.unique(cids):
        idx = np.flatnonzero(cids == i)
        block_eigs[int(i)] = smallest_eigenvalue(report.G_inf[np.ix_(idx, idx)])
    block_min = min(block_eigs.values())
    err = abs(block_min - report.e0_star)
    return OrderingVerdict(report.e0, report.e0_star, block_min, block_eigs, tol,
                           report.e0_star >= report.e0 - tol, err, err <= block_tol)


def ntk_instance(N: int, M: int, d: int, seed: int, shift: str = "scale", severity: float = 1.0,
                 unit_norm: bool = True, teacher: str = "linear-regression"):
    """Points, client ids, covariances and regression targets for Gram experiments."""
    if N >= 2:
        specs = make_feature_shift_suite(N, d, shift, severity, seed)
    else:
        specs = [ClientDistributionSpec(0, np.eye(d))]
    rng = np.random.default_rng([seed, 8191])
    X = np.concatenate([sample_inputs(s, M, rng) for s in specs])
    if unit_norm:
        X = X / np.linalg.norm(X, axis=1, keepdims=True)
    # normalizing can only create collinearity already present up to sign
    for _ in range(100):
        bad = collinear_pairs(X)
        if not bad:
            break
        for q in bad:
            x = specs[q // M].covariance @ rng.standard_normal(d)
            X[q] = x / np.linalg.norm(x) if unit_norm else x
    else:
        raise RuntimeError("could not draw non-collinear points")
    cids = np.repeat(np.arange(len(specs)), M)
    y = make_teacher(teacher, d, seed).clean(X)
    return X, cids, [s.covariance for s in specs], y


# ---------------------------------------------------------------------------
# finite width


def _isotropic_scale(S, rtol=1e-12):
    s = float(S[0, 0])
    return s if np.allclose(S, s * np.eye(S.shape[0]), rtol=0.0, atol=rtol * abs(s)) else None


def finite_width_limit(X, client_ids, covariances, samples: int = 10**6, seed: int = 0,
                       variant: str = "aggregated", estimator: str = "auto"):
    """Infinite-width value of ``G(0)`` under ``v ~ N(0, alpha^2 I)``.

    ``E relu(v.x_p) relu(v.x_q) / (||v||_{S_p} ||v||_{S_q})`` does not depend
    on ``alpha``.  When every ``S_i = s_i I`` the direction of ``v`` is
    uniform and independent of its length, giving
    ``k(x_p, x_q) / (d sqrt(s_p s_q))`` with ``k`` the unit arc-cosine kernel;
    otherwise (or with ``estimator="monte-carlo"``) it is estimated by
    Monte-Carlo.  Returns ``(matrix, stderr)``.
    """
    if estimator not in ("auto",) + ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    X, cids, _ = _check_points(X, client_ids)
    d = X.shape[1]
    scales = [_isotropic_scale(np.asarray(S, dtype=float)) for S in covariances]
    mask = same_client_mask(cids) if variant == "client_specific" else 1.0
    isotropic = all(s is not None for s in scales)
    if estimator == "closed-form" and not isotropic:
        raise ValueError("closed form needs isotropic covariances")
    if isotropic and estimator != "monte-carlo":
        s = np.asarray(scales)[cids]
        return arccos_kernel(X) / (d * np.sqrt(np.outer(s, s))) * mask, np.zeros((len(X), len(X)))
    Ls = [np.linalg.cholesky(np.asarray(S, dtype=float)) for S in covariances]
    s1 = np.zeros((len(X), len(X)))
    s2 = np.zeros_like(s1)
    for shard, n in enumerate(_mc_shards(samples, MC_CHUNK)):
        V = np.random.default_rng([seed, shard]).standard_normal((n, d))
        norms = np.stack([np.linalg.norm(V @ L, axis=1) for L in Ls], axis=1)   # ||v||_S = ||L^T v||
        F = np.maximum(V @ X.T, 0.0) / norms[:, cids]
        s1 += F.T @ F
        s2 += (F * F).T @ (F * F)
    mean = s1 / samples
    stderr = np.sqrt(np.maximum(s2 / samples - mean**2, 0.0) / samples)
    return mean * mask, stderr * mask


def _jacobians(model: TwoLayerBNModel, X, cids):
    """Per-point gradient blocks ``df_p/dv_k`` (P, m, d) and ``df_p/dgamma_k`` (P, m)."""
    norms = model.neuron_norms()[:, cids].T                  # (P, m)
    Z = X @ model.V.T
    gam = model.gamma_matrix()[:, cids].T                    # (P, m)
    act = (Z >= 0.0).astype(float)
    scale = model.c[None, :] / np.sqrt(model.m) / norms
    Jv = (scale * gam * act)[:, :, None] * projected_inputs(model, X, cids)
    Jg = scale * np.maximum(Z, 0.0)
    return Jv, Jg


def finite_width_grams(model: TwoLayerBNModel, X, client_ids, variant: str | None = None,
                       return_stderr: bool = False):
    """``(V, G)`` for the model at its current parameters.

    ``variant`` defaults to ``aggregated`` for a shared-gamma model and
    ``client_specific`` otherwise; the latter masks ``G`` to same-client
    pairs.  With ``return_stderr`` the per-entry standard error of ``G`` over
    the neuron sample is returned as a third element.
    """
    variant = variant or ("aggregated" if model.shared else "client_specific")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    X, cids, _ = _check_points(X, client_ids)
    Jv, Jg = _jacobians(model, X, cids)
    P = X.shape[0]
    Jv2 = Jv.reshape(P, -1)
    V = model.alpha**2 * (Jv2 @ Jv2.T)
    G = Jg @ Jg.T
    mask = same_client_mask(cids) if variant == "client_specific" else np.ones((P, P))
    G = G * mask
    V = 0.5 * (V + V.T)
    G = 0.5 * (G + G.T)
    if not return_stderr:
        return V, G
    # G is the mean over neurons of A[p,k] A[q,k] with A = sqrt(m) * Jg
    A2 = model.m * Jg**2
    second = (A2 @ A2.T) / model.m
    var = np.maximum(second * mask - G**2, 0.0)
    return V, G, np.sqrt(var / model.m)


@dataclass
class DynamicsTrace:
    steps: list = field(default_factory=list)
    lambda_min_Lambda: list = field(default_factory=list)
    lambda_min_V_over_alpha2: list = field(default_factory=list)
    lambda_min_G: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    variant: str = "aggregated"

    COLUMNS = ("step", "lambda_min_Lambda", "lambda_min_V_over_alpha2", "lambda_min_G", "loss")

    def append(self, step, lam, lam_v, lam_g, loss):
        vals = (lam, lam_v, lam_g, loss)
        if not all(np.isfinite(v) for v in vals):
            raise FloatingPointError(f"non-finite trace entry at step {step}: {vals}")
        self.steps.append(int(step))
        self.lambda_min_Lambda.append(float(lam))
        self.lambda_min_V_over_alpha2.append(float(lam_v))
        self.lambda_min_G.append(float(lam_g))
        self.loss.append(float(loss))

    def __len__(self):
        return len(self.steps)

    def fraction_at_least(self, threshold: float) -> float:
        lam = np.asarray(self.lambda_min_Lambda)
        return float(np.mean(lam >= threshold)) if lam.size else 0.0

    def first_step_below(self, loss_level: float):
        for s, v in zip(self.steps, self.loss):
            if v <= loss_level:
                return s
        return None

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for row in zip(self.steps, self.lambda_min_Lambda, self.lambda_min_V_over_alpha2,
                       self.lambda_min_G, self.loss):
            lines.append(",".join([str(row[0])] + [repr(v) for v in row[1:]]))
        return "\n".join(lines) + "\n"

    def to_dict(self):
        out = {c: getattr(self, c) for c in self.COLUMNS[1:]}
        out["step"] = self.steps
        out["variant"] = self.variant
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def track_dynamics(model: TwoLayerBNModel, X, client_ids, y, steps: int, lr: float,
                   variant: str | None = None):
    """Full-batch gradient descent on ``0.5 ||f - y||^2`` with a Gram trace per step.

    Step ``t`` of the trace describes the parameters before the ``t``-th
    update, so ``steps`` updates produce ``steps + 1`` rows.  The recorded
    loss is ``||f - y||^2``.  Returns ``(trace, final_model)``.
    """
    if steps < 0 or not lr > 0:
        raise ValueError("need steps >= 0 and lr > 0")
    variant = variant or ("aggregated" if model.shared else "client_specific")
    model = model.copy()
    X, cids, _ = _check_points(X, client_ids)
    y = np.asarray(y, dtype=float)
    trace = DynamicsTrace(variant=variant)
    for t in range(steps + 1):
        V, G = finite_width_grams(model, X, cids, variant)
        lam = symmetric_eigh(V / model.alpha**2 + G)[0][0]
        lam_v = symmetric_eigh(V)[0][0] / model.alpha**2
        lam_g = symmetric_eigh(G)[0][0]
        r = two_layer_predict(model, X, cids) - y
        trace.append(t, lam, lam_v, lam_g, float(r @ r))
        if t == steps:
            break
        grads = two_layer_gradients(model, X, cids, y)
        model.V = model.V - lr * grads["V"]
        model.gamma = model.gamma - lr * grads["gamma"]
    return trace, model


def width_soft_check(trace: DynamicsTrace, e0: float, required_fraction: float = 0.9):
    """Fraction of steps with ``lambda_min(Lambda) >= e0 / 2`` and whether it is flagged."""
    frac = trace.fraction_at_least(e0 / 2.0)
    return frac, frac < required_fraction
