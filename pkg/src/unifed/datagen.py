"""Synthetic per-client datasets with covariate (feature) shift.

Every client draws centered Gaussian inputs with its own covariance while
all clients share one labeling rule, so only ``p(x)`` differs across
clients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import LinalgError, check_symmetric, cholesky

SHIFT_KINDS = ("scale", "rotate", "anisotropic")
TEACHER_KINDS = ("linear-regression", "linear-classification", "two-layer-teacher")
COLLINEARITY_TOL = 1e-9


class GenerationError(RuntimeError):
    pass


@dataclass
class ClientDistributionSpec:
    client_id: int
    covariance: np.ndarray

    def __post_init__(self):
        self.covariance = check_symmetric(self.covariance)
        try:
            cholesky(self.covariance)
        except LinalgError as exc:
            raise ValueError(f"client {self.client_id}: covariance is not PD ({exc})") from exc

    @property
    def input_dim(self) -> int:
        return self.covariance.shape[0]


@dataclass
class TeacherSpec:
    """Labeling function shared by all clients.

    ``weights`` is a vector for the linear kinds and a dict with ``U``
    (hidden x d) and ``a`` (hidden,) for the two-layer teacher.
    """

    kind: str
    weights: object
    noise_std: float = 0.0
    binary: bool = False    # sign labels for the regression kinds

    def __post_init__(self):
        if self.kind not in TEACHER_KINDS:
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def is_classification(self) -> bool:
        return self.binary or self.kind == "linear-classification"

    def clean(self, X: np.ndarray) -> np.ndarray:
        """Noise-free teacher score for each row of ``X``."""
        if self.kind == "two-layer-teacher":
            U = np.asarray(self.weights["U"])
            a = np.asarray(self.weights["a"])
            return np.maximum(X @ U.T, 0.0) @ a / np.sqrt(len(a))
        return X @ np.asarray(self.weights)

    def label(self, X: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        score = self.clean(X)
        if self.noise_std > 0:
            if rng is None:
                raise ValueError("a generator is required when noise_std > 0")
            score = score + self.noise_std * rng.standard_normal(score.shape)
        if self.is_classification:
            return np.where(score >= 0.0, 1.0, -1.0)
        return score


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    client_id: int = 0
    indices: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(
                f"inconsistent dataset shapes {self.inputs.shape} / {self.labels.shape}"
            )
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.inputs[idx], self.labels[idx], self.client_id, self.indices[idx])


def make_teacher(kind: str, d: int, seed: int, noise_std: float = 0.0, hidden: int = 16,
                 binary: bool = False) -> TeacherSpec:
    rng = np.random.default_rng([seed, 7919])
    if kind == "two-layer-teacher":
        weights = {
            "U": rng.standard_normal((hidden, d)) / np.sqrt(d),
            "a": rng.choice([-1.0, 1.0], size=hidden),
        }
    else:
        w = rng.standard_normal(d)
        weights = w / np.linalg.norm(w)
    return TeacherSpec(kind, weights, noise_std, binary)


def collinear_pairs(X: np.ndarray, tol: float = COLLINEARITY_TOL, chunk: int = 1024) -> set[int]:
    """Indices ``q`` such that ``x_q`` is collinear with some earlier ``x_p``.

    Zero rows count as collinear with everything.
    """
    norms = np.linalg.norm(X, axis=1)
    bad = set(np.flatnonzero(norms == 0.0).tolist())
    U = X / np.where(norms == 0.0, 1.0, norms)[:, None]
    n = len(U)
    for start in range(0, n, chunk):
        block = np.abs(U[start:start + chunk] @ U.T)
        for r in range(block.shape[0]):
            q = start + r
            hits = np.flatnonzero(block[r, :q] >= 1.0 - tol)
            if hits.size:
                bad.add(q)
    return bad


def sample_inputs(spec: ClientDistributionSpec, M: int, rng: np.random.Generator) -> np.ndarray:
    L = cholesky(spec.covariance)
    X = rng.standard_normal((M, spec.input_dim)) @ L.T
    draws = M
    bad = collinear_pairs(X)
    while bad:
        for q in sorted(bad):
            X[q] = L @ rng.standard_normal(spec.input_dim)
            draws += 1
            if draws > 100 * M:
                raise GenerationError(
                    f"client {spec.client_id}: could not draw {M} pairwise non-collinear "
                    f"points within {100 * M} draws"
                )
        bad = collinear_pairs(X)
    return X


def sample_client_dataset(spec: ClientDistributionSpec, teacher: TeacherSpec, M: int, seed: int) -> Dataset:
    if M < 2:
        raise ValueError("M must be at least 2")
    rng = np.random.default_rng([seed, spec.client_id])
    X = sample_inputs(spec, M, rng)
    y = teacher.label(X, rng)
    return Dataset(X, y, spec.client_id)


def _random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def make_feature_shift_suite(N: int, d: int, shift: str, severity: float, seed: int) -> list[ClientDistributionSpec]:
    """Covariances for ``N`` clients whose inputs differ only in distribution.

    ``scale``: ``S_i = (1 + severity * i / N) I`` for ``i = 1..N``.
    ``rotate``: random rotation of a fixed spectrum spanning ``[1, 1 + severity]``.
    ``anisotropic``: per-client log-eigenvalues ``severity * U(-0.5, 0.5)``.
    """
    if N < 2 or d < 2:
        raise ValueError("need N >= 2 clients and d >= 2 dimensions")
    if not severity > 0:
        raise ValueError("severity must be > 0")
    if shift not in SHIFT_KINDS:
        raise ValueError(f"unknown shift kind {shift!r}; expected one of {SHIFT_KINDS}")
    rng = np.random.default_rng([seed, 104729])
    covs = []
    for i in range(1, N + 1):
        if shift == "scale":
            S = (1.0 + severity * i / N) * np.eye(d)
        elif shift == "rotate":
            lam = np.linspace(1.0, 1.0 + severity, d)
            R = _random_rotation(d, rng)
            S = (R * lam) @ R.T
        else:
            lam = np.exp(severity * rng.uniform(-0.5, 0.5, size=d))
            S = np.diag(lam)
        covs.append(0.5 * (S + S.T))
    specs = []
    for i, S in enumerate(covs):
        try:
            specs.append(ClientDistributionSpec(i, S))
        except ValueError as exc:
            raise ValueError(f"severity {severity} produced a non-PD covariance: {exc}") from exc
    return specs


def mean_covariance(specs: Sequence[ClientDistributionSpec]) -> np.ndarray:
    return np.mean([s.covariance for s in specs], axis=0)


def make_unseen_spec(specs: Sequence[ClientDistributionSpec], factor: float, client_id: int | None = None) -> ClientDistributionSpec:
    """External client with covariance ``factor`` times the training mean."""
    if not factor > 0:
        raise ValueError("factor must be > 0")
    cid = len(specs) if client_id is None else client_id
    return ClientDistributionSpec(cid, factor * mean_covariance(specs))


def split_sizes(M: int, fractions: Sequence[float]) -> list[int]:
    sizes = [int(round(f * M)) for f in fractions[:-1]]
    sizes.append(M - sum(sizes))
    return sizes


def holdout_split(ds: Dataset, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[Dataset, ...]:
    fractions = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fractions):
        raise ValueError(f"split fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    sizes = split_sizes(len(ds), fractions)
    if min(sizes) <= 0:
        raise ValueError(f"split of {len(ds)} samples by {fractions} leaves an empty part: {sizes}")
    perm = np.random.default_rng([seed, ds.client_id, 31337]).permutation(len(ds))
    parts, start = [], 0
    for size in sizes:
        parts.append(ds.subset(np.sort(perm[start:start + size])))
        start += size
    return tuple(parts)


def write_csv(path, datasets: Sequence[Dataset]) -> None:
    d = datasets[0].input_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "y"] + [f"x{j}" for j in range(d)])
        for ds in datasets:
            for x, y in zip(ds.inputs, ds.labels):
                writer.writerow([ds.client_id, repr(float(y))] + [repr(float(v)) for v in x])


def read_csv(path) -> list[Dataset]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["client_id", "y"]:
            raise ValueError(f"unexpected header {header[:2]}")
        rows: dict[int, list] = {}
        for row in reader:
            rows.setdefault(int(row[0]), []).append([float(v) for v in row[1:]])
    out = []
    for cid in sorted(rows):
        arr = np.array(rows[cid])
        out.append(Dataset(arr[:, 1:], arr[:, 0], cid))
    return out
