"""Synthetic learning tasks, non-IID partitioning and loss evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import SeedSpec, as_seed

KINDS = ("least_squares", "logistic", "mlp1")


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    kind: str
    w_star: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.X.ndim != 2 or self.X.shape[0] == 0:
            raise ValueError("dataset must be a non-empty 2-D feature matrix")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("one label per sample required")
        for arr in (self.X, self.y, self.w_star):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dimension(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class LossModel:
    kind: str
    dim: int
    hidden: int = 8

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.dim < 1 or self.hidden < 1:
            raise ValueError("dim and hidden must be positive")

    @property
    def d(self) -> int:
        if self.kind == "mlp1":
            return self.hidden * self.dim + 2 * self.hidden + 1
        return self.dim

    def _unpack(self, w: np.ndarray):
        h, p = self.hidden, self.dim
        W1 = w[: h * p].reshape(h, p)
        b1 = w[h * p : h * p + h]
        v = w[h * p + h : h * p + 2 * h]
        c = w[-1]
        return W1, b1, v, c


@dataclass(frozen=True)
class Partition:
    shards: tuple[np.ndarray, ...]
    skew: float

    @property
    def M(self) -> int:
        return len(self.shards)


@dataclass(frozen=True)
class Constants:
    """Empirical smoothness / variance / second-moment estimates."""

    L_hat: float
    sigma_hat: float
    G_hat: float


def make_synthetic(
    kind: str,
    n_samples: int,
    dim: int,
    seed: SeedSpec | int,
    noise: float | None = None,
    hidden: int = 8,
) -> Dataset:
    """Draw a dataset with a planted model.

    least_squares: ``y = <x, w*> + noise * N(0,1)`` with ``x ~ N(0, I)``.
    logistic: ``y = 1[<x, w*> + noise * N(0,1) > 0]`` with ``|w*| = 3``.
    mlp1: labels thresholded at the median output of a random tanh network.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    if n_samples < 1 or dim < 1:
        raise ValueError("n_samples and dim must be positive")
    rng = as_seed(seed).stream(f"data:{kind}")
    X = rng.standard_normal((n_samples, dim))
    eps = rng.standard_normal(n_samples)
    if kind == "least_squares":
        noise = 0.1 if noise is None else noise
        w_star = rng.standard_normal(dim)
        y = X @ w_star + noise * eps
    elif kind == "logistic":
        noise = 0.5 if noise is None else noise
        w_star = rng.standard_normal(dim)
        w_star *= 3.0 / np.linalg.norm(w_star)
        y = (X @ w_star + noise * eps > 0).astype(np.float64)
    else:
        noise = 0.1 if noise is None else noise
        model = LossModel("mlp1", dim, hidden)
        w_star = rng.standard_normal(model.d)
        z = _mlp_forward(model, w_star, X)[1]
        y = (z - np.median(z) + noise * eps > 0).astype(np.float64)
    return Dataset(X, y, kind, w_star)


def partition(ds: Dataset, M: int, skew: float, seed: SeedSpec | int) -> Partition:
    """Split sample indices into ``M`` near-equal contiguous shards.

    Samples are ordered by ``skew * label_rank + (1 - skew) * uniform``, so
    ``skew=0`` is a uniform shuffle and ``skew=1`` is label-sorted sharding.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if M > ds.n:
        raise ValueError(f"cannot split {ds.n} samples into {M} shards")
    if not 0.0 <= skew <= 1.0:
        raise ValueError("skew must lie in [0, 1]")
    rng = as_seed(seed).stream("partition")
    jitter = rng.random(ds.n)
    order = np.lexsort((jitter, ds.y))
    rank = np.empty(ds.n)
    rank[order] = np.arange(ds.n) / ds.n
    key = skew * rank + (1.0 - skew) * rng.random(ds.n)
    perm = np.argsort(key, kind="stable")
    shards = tuple(np.sort(s) for s in np.array_split(perm, M))
    return Partition(shards, float(skew))


def _mlp_forward(model: LossModel, w: np.ndarray, X: np.ndarray):
    W1, b1, v, c = model._unpack(w)
    a = np.tanh(X @ W1.T + b1)
    return a, a @ v + c


def loss_and_grad(model: LossModel, w: np.ndarray, batch, ds: Dataset) -> tuple[float, np.ndarray]:
    """Mini-batch average loss and its exact gradient."""
    X = ds.X[batch]
    y = ds.y[batch]
    b = X.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if model.kind == "least_squares":
        r = X @ w - y
        return 0.5 * float(r @ r) / b, X.T @ r / b
    if model.kind == "logistic":
        z = X @ w
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        return loss, X.T @ (_sigmoid(z) - y) / b
    a, z = _mlp_forward(model, w, X)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    dz = (_sigmoid(z) - y) / b
    _, _, v, _ = model._unpack(w)
    dpre = np.outer(dz, v) * (1.0 - a * a)
    grad = np.concatenate([(dpre.T @ X).ravel(), dpre.sum(axis=0), a.T @ dz, [dz.sum()]])
    return loss, grad


def per_sample_grads(model: LossModel, w: np.ndarray, idx, ds: Dataset) -> np.ndarray:
    """Row ``i`` is the gradient of sample ``idx[i]``'s loss."""
    X = ds.X[idx]
    y = ds.y[idx]
    if model.kind == "least_squares":
        return X * (X @ w - y)[:, None]
    if model.kind == "logistic":
        return X * (_sigmoid(X @ w) - y)[:, None]
    a, z = _mlp_forward(model, w, X)
    dz = _sigmoid(z) - y
    _, _, v, _ = model._unpack(w)
    dpre = dz[:, None] * v[None, :] * (1.0 - a * a)
    gW1 = (dpre[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)
    return np.hstack([gW1, dpre, a * dz[:, None], dz[:, None]])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def shard_loss(model: LossModel, w: np.ndarray, shard, ds: Dataset) -> float:
    return loss_and_grad(model, w, shard, ds)[0]


def global_loss(model: LossModel, w: np.ndarray, ds: Dataset, part: Partition) -> float:
    """Uniform (1/M) average of shard losses."""
    return float(np.mean([shard_loss(model, w, s, ds) for s in part.shards]))


def global_grad(model: LossModel, w: np.ndarray, ds: Dataset, part: Partition) -> np.ndarray:
    return np.mean([loss_and_grad(model, w, s, ds)[1] for s in part.shards], axis=0)


def accuracy(model: LossModel, w: np.ndarray, ds: Dataset, idx=None) -> float:
    if model.kind == "least_squares":
        raise ValueError("accuracy is defined for classification tasks only")
    idx = np.arange(ds.n) if idx is None else idx
    X = ds.X[idx]
    z = X @ w if model.kind == "logistic" else _mlp_forward(model, w, X)[1]
    return float(np.mean((z > 0) == (ds.y[idx] > 0.5)))


def _top_eig_psd(A: np.ndarray, iters: int = 1000, tol: float = 1e-12) -> float:
    v = np.ones(A.shape[0]) / np.sqrt(A.shape[0])
    lam = 0.0
    for _ in range(iters):
        u = A @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = u / nu
        if abs(nu - lam) <= tol * nu:
            return float(nu)
        lam = nu
    return float(lam)


def estimate_constants(
    model: LossModel,
    ds: Dataset,
    part: Partition,
    probe_count: int = 100,
    seed: SeedSpec | int = 0,
    probe_points: Sequence[np.ndarray] | None = None,
    batch_size: int = 1,
    probe_scale: float = 1.0,
) -> Constants:
    """Estimate (L, sigma, G) of the smoothness / bounded-moment assumptions.

    sigma^2 and G^2 are maxima over probe points and shards of the exact
    without-replacement mini-batch variance and second moment at
    ``batch_size``. Probe points default to ``N(0, probe_scale^2 I)`` draws.
    """
    if probe_points is None:
        if probe_count < 100:
            raise ValueError("probe_count must be >= 100")
        rng = as_seed(seed).stream("probes")
        probe_points = [probe_scale * rng.standard_normal(model.d) for _ in range(probe_count)]
    probe_points = [np.asarray(p, dtype=np.float64) for p in probe_points]

    if model.kind == "least_squares":
        L_hat = max(_top_eig_psd(ds.X[s].T @ ds.X[s] / len(s)) for s in part.shards)
    else:
        rng = as_seed(seed).stream("probe-pairs")
        L_hat = 0.0
        for p in probe_points:
            q = p + 1e-2 * rng.standard_normal(model.d)
            for s in part.shards:
                g1 = loss_and_grad(model, p, s, ds)[1]
                g2 = loss_and_grad(model, q, s, ds)[1]
                L_hat = max(L_hat, float(np.linalg.norm(g1 - g2) / np.linalg.norm(p - q)))

    var_max = 0.0
    second_max = 0.0
    for p in probe_points:
        for s in part.shards:
            n = len(s)
            b = min(batch_size, n)
            G = per_sample_grads(model, p, s, ds)
            mean = G.mean(axis=0)
            spread = float(np.mean(np.sum((G - mean) ** 2, axis=1)))
            var = spread * (n - b) / (b * (n - 1)) if n > 1 else 0.0
            var_max = max(var_max, var)
            second_max = max(second_max, float(mean @ mean) + var)
    return Constants(float(L_hat), float(np.sqrt(var_max)), float(np.sqrt(second_max)))


def export_csv(ds: Dataset, path: str | Path) -> None:
    """One sample per row, label in the last column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(ds.dimension)] + ["label"])
        for row, label in zip(ds.X, ds.y):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(label))])


def import_csv(path: str | Path, kind: str) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = np.array([[float(v) for v in r] for r in reader])
    return Dataset(np.ascontiguousarray(rows[:, :-1]), np.ascontiguousarray(rows[:, -1]), kind)
