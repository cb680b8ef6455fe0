"""Feature-distribution divergence at BN layer outputs.

Normalized BN features (after the mean/variance step, before the affine
``gamma, beta``) are summarized by their first two moments and compared with
the Gaussian 2-Wasserstein distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .fedtest import ReestimationConfig, make_batches, reestimated_model
from .linalg import check_symmetric, sqrtm_psd
from .nn import Network


@dataclass
class FeatureMoments:
    layer_id: str
    mean: np.ndarray
    covariance: np.ndarray
    n_samples: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = check_symmetric(np.atleast_2d(self.covariance))
        if self.n_samples < 2:
            raise ValueError("moments need at least two samples")
        if self.covariance.shape != (self.mean.size, self.mean.size):
            raise ValueError("mean and covariance dimensions differ")

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_samples(cls, layer_id: str, Z: np.ndarray) -> "FeatureMoments":
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[0] < 2:
            raise ValueError("need a (n >= 2, dim) sample array")
        mu = Z.mean(axis=0)
        C = Z - mu
        cov = C.T @ C / (Z.shape[0] - 1)
        return cls(layer_id, mu, 0.5 * (cov + cov.T), Z.shape[0])

    @classmethod
    def standard(cls, layer_id: str, dim: int) -> "FeatureMoments":
        return cls(layer_id, np.zeros(dim), np.eye(dim), 2**31)

    def marginal(self) -> "FeatureMoments":
        """Same per-feature moments with correlations dropped."""
        return FeatureMoments(self.layer_id, self.mean, np.diag(np.diag(self.covariance)), self.n_samples)


def _capture(model: Network, X: np.ndarray, bn_mode: str, layer_ids=None) -> dict:
    model = model.copy() if bn_mode != "eval" else model
    _, cache = model.forward(X, bn_mode, update_stats=False, capture=True)
    feats = cache["normalized"]
    if layer_ids is not None:
        missing = [l for l in layer_ids if l not in feats]
        if missing:
            raise KeyError(f"no BN layer named {missing}")
        feats = {l: feats[l] for l in layer_ids}
    return feats


def collect_feature_moments(model: Network, data: Dataset, layer_ids=None, bn_mode: str = "eval"):
    """Moments of normalized features at each BN layer.

    ``eval`` uses the stored statistics; ``probe``/``train`` normalize the
    dataset by its own full-batch statistics.  Running statistics are never
    updated.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if bn_mode == "train":
        bn_mode = "probe"
    if bn_mode not in ("eval", "probe"):
        raise ValueError(f"unsupported capture mode {bn_mode!r}")
    feats = _capture(model, data.inputs, bn_mode, layer_ids)
    return [FeatureMoments.from_samples(lid, Z) for lid, Z in feats.items()]


def streamed_features(model: Network, batches, cfg: ReestimationConfig, layer_ids=None) -> dict:
    """Normalized features produced while re-estimating over ``batches``."""
    clone = reestimated_model(model, cfg)
    out: dict = {}
    for b in batches:
        _, cache = clone.forward(b.inputs, "reestimate", capture=True)
        for lid, Z in cache["normalized"].items():
            if layer_ids is None or lid in layer_ids:
                out.setdefault(lid, []).append(Z)
    return {lid: np.concatenate(v) for lid, v in out.items()}


def gaussian_w2(a: FeatureMoments, b: FeatureMoments) -> float:
    """2-Wasserstein distance between ``N(mu_a, S_a)`` and ``N(mu_b, S_b)``."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    rb = sqrtm_psd(b.covariance)
    cross = sqrtm_psd(0.5 * (rb @ a.covariance @ rb + (rb @ a.covariance @ rb).T))
    d2 = float(np.sum((a.mean - b.mean) ** 2)) + float(
        np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.trace(cross)
    )
    return float(np.sqrt(max(d2, 0.0)))


def w2_to_standard(m: FeatureMoments) -> float:
    """Distance of the per-feature marginals from ``N(0, 1)``.

    BN only standardizes each feature, so correlations are left out.
    """
    sd = np.sqrt(np.clip(np.diag(m.covariance), 0.0, None))
    return float(np.sqrt(np.sum(m.mean**2) + np.sum((sd - 1.0) ** 2)))


DIVERGENCE_COLUMNS = ("layer_id", "mode", "w2_seen_unseen", "w2_to_standard")


@dataclass
class DivergenceReport:
    rows: list = field(default_factory=list)   # dicts keyed by DIVERGENCE_COLUMNS

    def __post_init__(self):
        for r in self.rows:
            if r["w2_seen_unseen"] < 0 or r["w2_to_standard"] < 0:
                raise ValueError("distances must be non-negative")

    def value(self, layer_id: str, mode: str, key: str = "w2_seen_unseen") -> float:
        for r in self.rows:
            if r["layer_id"] == layer_id and r["mode"] == mode:
                return r[key]
        raise KeyError((layer_id, mode))

    @property
    def layers(self) -> list:
        seen = []
        for r in self.rows:
            if r["layer_id"] not in seen:
                seen.append(r["layer_id"])
        return seen

    def reduced_everywhere(self) -> bool:
        return all(self.value(l, "reestimated") < self.value(l, "frozen") for l in self.layers)

    def to_csv(self) -> str:
        lines = [",".join(DIVERGENCE_COLUMNS)]
        for r in self.rows:
            lines.append(f"{r['layer_id']},{r['mode']},{r['w2_seen_unseen']!r},{r['w2_to_standard']!r}")
        return "\n".join(lines) + "\n"

    def to_json(self, **kw) -> str:
        return json.dumps({"rows": self.rows}, **kw)


def seen_reference(model: Network, seen, layer_ids=None) -> dict:
    """Seen-mixture features: every seen client normalized by its own statistics, pooled."""
    pooled: dict = {}
    for ds in seen:
        for lid, Z in _capture(model, ds.inputs, "probe", layer_ids).items():
            pooled.setdefault(lid, []).append(Z)
    return {lid: np.concatenate(v) for lid, v in pooled.items()}


def divergence_experiment(global_model: Network, seen, unseen: Dataset,
                          cfg: ReestimationConfig | None = None, layer_ids=None) -> DivergenceReport:
    """Seen-vs-unseen feature divergence with frozen and re-estimated statistics.

    ``seen`` is a list of internal-client datasets.  The frozen arm
    normalizes the unseen data with the global model's stored statistics;
    the re-estimated arm pools the features produced while streaming the
    unseen data in ``cfg.batch_size`` batches.
    """
    cfg = cfg or ReestimationConfig()
    ref = {lid: FeatureMoments.from_samples(lid, Z) for lid, Z in seen_reference(global_model, seen, layer_ids).items()}
    frozen = _capture(global_model, unseen.inputs, "eval", layer_ids)
    batches = make_batches(unseen, cfg.batch_size, cfg.order_seed)
    streamed = streamed_features(global_model, batches, cfg, layer_ids)
    rows = []
    for lid in ref:
        for mode, Z in (("frozen", frozen[lid]), ("reestimated", streamed[lid])):
            m = FeatureMoments.from_samples(lid, Z)
            rows.append({"layer_id": lid, "mode": mode,
                         "w2_seen_unseen": gaussian_w2(ref[lid], m),
                         "w2_to_standard": w2_to_standard(m)})
    return DivergenceReport(rows)
